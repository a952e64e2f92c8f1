"""Stage 1: bimodal stay encoding and clinical-feature reconstruction."""

from __future__ import annotations

import logging
from dataclasses import asdict

import numpy as np

from hmp import tensor as T
from hmp.checkpoint import Checkpoint
from hmp.config import ModelDims, StayTrainConfig
from hmp.data.batching import AdmissionBatch, StayBatch, batch_iter
from hmp.data.records import Dataset, StayRecord
from hmp.errors import EmptyBatch, EmptyDataset, ShapeMismatch
from hmp.nn import LSTM, AdamW, FusionBlock, Linear, LSTMDecoder, Module, lstm_encode, mlp_forward
from hmp.tensor import Tensor

log = logging.getLogger("hmp.train")


class StayEncoder(Module):
    def __init__(self, dims: ModelDims, seed: int | None = None):
        self.dims = dims
        self.lstm_enc = LSTM(dims.d_f, dims.d_r)
        self.demo_mlp = Linear(dims.d_dem, dims.d_r)
        self.fusion = FusionBlock(dims.d_r)
        self.lstm_dec = LSTMDecoder(dims.d_r, dims.d_f)
        if seed is not None:
            self.reset_parameters(seed)

    def encoder_parameters(self) -> dict:
        return {k: v for k, v in self.parameters().items() if not k.startswith("lstm_dec.")}

    def tokens(self, features: Tensor, demographics: Tensor) -> Tensor:
        """Stack <h, d> along a token axis: [..., 2, d_r]."""
        if features.shape[-1] != self.dims.d_f:
            raise ShapeMismatch(f"stay features need {self.dims.d_f} columns, got {features.shape[-1]}")
        if demographics.shape[-1] != self.dims.d_dem:
            raise ShapeMismatch(f"demographics need extent {self.dims.d_dem}, got {demographics.shape[-1]}")
        h = lstm_encode(self.lstm_enc, features)
        d = mlp_forward(self.demo_mlp, demographics)
        return T.stack([h, d], axis=-2)

    def encode(self, features: Tensor, demographics: Tensor) -> Tensor:
        return self.fusion(self.tokens(features, demographics))

    def reconstruct(self, b: Tensor, steps: int) -> Tensor:
        return self.lstm_dec(b, steps)


def encode_stay(enc: StayEncoder, stay: StayRecord | np.ndarray, demographics) -> Tensor:
    """Fused representation of one stay, extent d_r."""
    feats = stay.features if isinstance(stay, StayRecord) else stay
    return enc.encode(T._as_tensor(feats), T._as_tensor(demographics))


def reconstruction_loss(recon: Tensor, target: np.ndarray, presence: np.ndarray | None = None) -> Tensor:
    """Mean over real stay-hours of the squared reconstruction error.

    ``recon`` and ``target`` are [..., T, d_f]; ``presence`` marks real stays
    over the leading axes. Padded stays contribute nothing, to the sum or to
    the normalizer.
    """
    steps = target.shape[-2]
    if presence is None:
        n_stays = int(np.prod(target.shape[:-2]))
        diff_src = recon
    else:
        n_stays = int(np.sum(presence))
        diff_src = T.mul(recon, Tensor(np.asarray(presence, dtype=np.float64)[..., None, None]))
    if n_stays == 0:
        raise EmptyBatch("no real stays in batch")
    return T.scale(T.sse(diff_src, Tensor(target)), 1.0 / (n_stays * steps))


def stay_loss(enc: StayEncoder, batch: StayBatch | AdmissionBatch) -> Tensor:
    if len(batch) == 0:
        raise EmptyBatch("empty batch")
    if isinstance(batch, AdmissionBatch):
        feats = batch.stays
        dem = np.broadcast_to(batch.demographics[:, None, :], feats.shape[:2] + batch.demographics.shape[-1:])
        presence = batch.presence
    else:
        feats, dem, presence = batch.features, batch.demographics, None
    b = enc.encode(Tensor(feats), Tensor(dem))
    recon = enc.reconstruct(b, feats.shape[-2])
    return reconstruction_loss(recon, feats, presence)


def checkpoint_config(dims: ModelDims, **extra) -> dict:
    return {"dims": asdict(dims), **extra}


def dims_from_checkpoint(ckpt: Checkpoint) -> ModelDims:
    return ModelDims(**ckpt.config["dims"])


def pretrain_stay(ds: Dataset | list, dims: ModelDims, cfg: StayTrainConfig = StayTrainConfig()) -> Checkpoint:
    """Train encoder and decoder with AdamW on reconstruction; returns a ``stage="stay"`` checkpoint."""
    items = ds.stays() if isinstance(ds, Dataset) else list(ds)
    if not items:
        raise EmptyDataset("no stays to pretrain on")
    enc = StayEncoder(dims, seed=cfg.seed)
    opt = AdamW(enc, lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        total, count = 0.0, 0
        for batch in batch_iter(items, "stay", cfg.batch_size, shuffle_seed=_epoch_seed(cfg.seed, epoch)):
            loss = stay_loss(enc, batch)
            T.backward(loss)
            opt.step()
            total += loss.item() * len(batch)
            count += len(batch)
        history.append({"epoch": epoch, "loss": total / count})
        log.info("epoch=%d loss=%.6f", epoch, total / count)
    params = {f"stay.{k}": v for k, v in enc.state_dict().items()}
    return Checkpoint(
        stage="stay",
        params=params,
        config=checkpoint_config(dims, train=asdict(cfg)),
        seed=cfg.seed,
        history=history,
    )


def stay_encoder_from_checkpoint(ckpt: Checkpoint, seed: int = 0) -> StayEncoder:
    enc = StayEncoder(dims_from_checkpoint(ckpt), seed=seed)
    enc.load_state_dict({k[len("stay.") :]: v for k, v in ckpt.params.items() if k.startswith("stay.")})
    return enc


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(seed) * 100_003 + int(epoch)
