"""Stage 2: admission encoding, masked code prediction and inter-modality contrast."""

from __future__ import annotations

import logging
from dataclasses import asdict

import numpy as np

from hmp import tensor as T
from hmp.checkpoint import MCP_HEADS, STAY_DECODER, Checkpoint
from hmp.config import AdmissionTrainConfig, ModelDims
from hmp.data.batching import AdmissionBatch, admission_batch, batch_iter
from hmp.data.masking import mask_codes
from hmp.data.notes import note_embed
from hmp.data.records import AdmissionRecord, Dataset
from hmp.errors import BatchTooSmall, EmptyBatch, EmptyDataset, TooFewTokens
from hmp.nn import AdamW, FusionBlock, Linear, Module, mlp_forward
from hmp.stay import StayEncoder, _epoch_seed, checkpoint_config, dims_from_checkpoint
from hmp.tensor import Tensor

log = logging.getLogger("hmp.train")

MODALITIES = ("s", "c", "g", "l")
CONTRASTED = ("c", "g", "l")


class AdmissionEncoder(Module):
    def __init__(self, dims: ModelDims, seed: int | None = None):
        self.dims = dims
        d_r = dims.d_r
        self.stay = StayEncoder(dims)
        self.stay_agg = Linear(dims.max_stays * d_r, d_r)
        self.icd_mlp = Linear(dims.n_icd, d_r)
        self.drug_mlp = Linear(dims.n_drug, d_r)
        self.note_proj = Linear(dims.d_note, d_r)
        self.adm_fusion = FusionBlock(d_r)
        self.mcp_icd = Linear(d_r, dims.n_icd)
        self.mcp_drug = Linear(d_r, dims.n_drug)
        if seed is not None:
            self.reset_parameters(seed)

    def trainable(self, skip=STAY_DECODER) -> dict:
        return {k: v for k, v in self.parameters().items() if not k.startswith(tuple(skip))}

    @classmethod
    def from_stay_checkpoint(cls, ckpt: Checkpoint, seed: int = 0) -> "AdmissionEncoder":
        ckpt.require("stay")
        enc = cls(dims_from_checkpoint(ckpt), seed=seed)
        enc.load_state_dict(ckpt.params)
        return enc


def _as_batch(enc: AdmissionEncoder, batch) -> AdmissionBatch:
    if isinstance(batch, AdmissionBatch):
        return batch
    return admission_batch(list(batch), enc.dims.max_stays)


def aggregate_stays(enc: AdmissionEncoder, batch: AdmissionBatch) -> Tensor:
    """s = W_s [b_1; ...; b_M] + b_s with zero vectors in padded slots. Returns [B, d_r]."""
    B, M = batch.presence.shape
    dem = np.broadcast_to(batch.demographics[:, None, :], (B, M, batch.demographics.shape[-1]))
    b = enc.stay.encode(Tensor(batch.stays), Tensor(dem))
    b = T.mul(b, Tensor(batch.presence[:, :, None]))
    return enc.stay_agg(T.reshape(b, (B, M * enc.dims.d_r)))


def aggregate_admission(enc: AdmissionEncoder, admission: AdmissionRecord, demographics) -> Tensor:
    """Single-record form of :func:`aggregate_stays`; returns [d_r]."""
    s = aggregate_stays(enc, admission_batch([(admission, np.asarray(demographics))], enc.dims.max_stays))
    return T.reshape(s, (enc.dims.d_r,))


def embed_codes(enc: AdmissionEncoder, icd, drugs) -> tuple[Tensor, Tensor]:
    return mlp_forward(enc.icd_mlp, T._as_tensor(icd)), mlp_forward(enc.drug_mlp, T._as_tensor(drugs))


def embed_notes(enc: AdmissionEncoder, note_tokens: list) -> Tensor:
    raw = np.stack([note_embed(toks, enc.dims.d_note) for toks in note_tokens])
    return enc.note_proj(Tensor(raw))


def admission_fuse(enc: AdmissionEncoder, tokens: dict) -> Tensor:
    """Fuse the modality tokens present in ``tokens`` (keys from s, c, g, l) in canonical order."""
    present = [tokens[k] for k in MODALITIES if tokens.get(k) is not None]
    if len(present) < 2:
        raise TooFewTokens(f"fusion needs at least two modality tokens, got {len(present)}")
    return enc.adm_fusion(T.stack(present, axis=-2))


def modality_tokens(enc: AdmissionEncoder, batch: AdmissionBatch, icd=None, drugs=None) -> dict:
    """s, c, g, l for a batch; ``icd``/``drugs`` override the batch codes (e.g. masked)."""
    c, g = embed_codes(
        enc,
        batch.icd if icd is None else icd,
        batch.drugs if drugs is None else drugs,
    )
    return {
        "s": aggregate_stays(enc, batch),
        "c": c,
        "g": g,
        "l": embed_notes(enc, batch.note_tokens),
    }


def encode_admission(enc: AdmissionEncoder, batch) -> Tensor:
    """Full-modality admission representation a, [B, d_r]."""
    batch = _as_batch(enc, batch)
    return admission_fuse(enc, modality_tokens(enc, batch))


def mcp_objective(p_icd: Tensor, p_drug: Tensor, ind_icd, ind_drug) -> Tensor:
    """(1/N) sum_i (||p^c_i - c^m_i||^2 + ||p^g_i - g^m_i||^2)."""
    n = p_icd.shape[0]
    if n == 0:
        raise EmptyBatch("empty batch")
    total = T.add(T.sse(p_icd, T._as_tensor(ind_icd)), T.sse(p_drug, T._as_tensor(ind_drug)))
    return T.scale(total, 1.0 / n)


def sample_masks(batch: AdmissionBatch, rate: float, rng: np.random.Generator):
    """Per admission, an ICD plan then a drug plan, drawn from one stream."""
    icd_plans, drug_plans = [], []
    for i in range(len(batch)):
        icd_plans.append(mask_codes(batch.icd[i], rate, rng))
        drug_plans.append(mask_codes(batch.drugs[i], rate, rng))
    return icd_plans, drug_plans


def mcp_loss(enc: AdmissionEncoder, batch, mask_rate: float, rng: np.random.Generator) -> Tensor:
    batch = _as_batch(enc, batch)
    if len(batch) == 0:
        raise EmptyBatch("empty batch")
    icd_plans, drug_plans = sample_masks(batch, mask_rate, rng)
    kept_icd = np.stack([p.kept for p in icd_plans])
    kept_drug = np.stack([p.kept for p in drug_plans])
    a = admission_fuse(enc, modality_tokens(enc, batch, icd=kept_icd, drugs=kept_drug))
    p_icd = T.sigmoid(enc.mcp_icd(a))
    p_drug = T.sigmoid(enc.mcp_drug(a))
    return mcp_objective(
        p_icd,
        p_drug,
        np.stack([p.indicator for p in icd_plans]),
        np.stack([p.indicator for p in drug_plans]),
    )


def _unit_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = T.sqrt(T.add(T.tsum(T.mul(x, x), axis=-1, keepdims=True), eps))
    return T.div(x, norm)


def cosine_matrix(r: Tensor, a: Tensor) -> Tensor:
    """sim[i, j] = cos(r_i, a_j)."""
    return T.matmul(_unit_rows(r), T.transpose(_unit_rows(a)))


def nce_from_similarity(sim: Tensor, tau: float) -> Tensor:
    """Per-row u_i = -log(exp(sim_ii/tau) / sum_{j != i} exp(sim_ij/tau)).

    The positive pair is left out of the denominator, so u_i can be negative.
    """
    B = sim.shape[0]
    if B < 2:
        raise BatchTooSmall("contrastive loss needs at least two admissions")
    logits = T.scale(sim, 1.0 / tau)
    eye = np.eye(B)
    positive = T.tsum(T.mul(logits, Tensor(eye)), axis=-1)
    return T.sub(T.logsumexp_last_axis(logits, mask=eye == 0), positive)


def cl_loss(enc: AdmissionEncoder, batch, tau: float, tokens: dict | None = None) -> Tensor:
    """Mean of u(r_i) over admissions and r in {c, g, l}; s is never left out."""
    batch = _as_batch(enc, batch)
    if len(batch) < 2:
        raise BatchTooSmall("contrastive loss needs at least two admissions")
    if tokens is None:
        tokens = modality_tokens(enc, batch)
    terms = []
    for r in CONTRASTED:
        rest = {k: v for k, v in tokens.items() if k != r}
        a_without = admission_fuse(enc, rest)
        terms.append(T.tsum(nce_from_similarity(cosine_matrix(tokens[r], a_without), tau)))
    total = T.add(T.add(terms[0], terms[1]), terms[2])
    return T.scale(total, 1.0 / (len(CONTRASTED) * len(batch)))


def admission_loss(enc, batch, cfg: AdmissionTrainConfig, rng) -> tuple[Tensor, float, float]:
    """L_MCP + lam * L_CL; returns (total, mcp value, cl value).

    A batch of one admission has no negatives; its contrastive term is skipped.
    """
    batch = _as_batch(enc, batch)
    mcp = mcp_loss(enc, batch, cfg.mask_rate, rng)
    if len(batch) < 2 or cfg.lam == 0:
        return mcp, mcp.item(), 0.0
    cl = cl_loss(enc, batch, cfg.tau)
    return T.add(mcp, T.scale(cl, cfg.lam)), mcp.item(), cl.item()


def pretrain_admission(
    ds: Dataset | list,
    stage1: Checkpoint,
    cfg: AdmissionTrainConfig = AdmissionTrainConfig(),
) -> Checkpoint:
    """Initialize from the stage-1 checkpoint and train with AdamW on the combined loss."""
    stage1.require("stay")
    items = ds.admissions() if isinstance(ds, Dataset) else list(ds)
    if not items:
        raise EmptyDataset("no admissions to pretrain on")
    enc = AdmissionEncoder.from_stay_checkpoint(stage1, seed=cfg.seed)
    opt = AdamW(enc.trainable(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        sums = np.zeros(3)
        count = 0
        for batch in batch_iter(
            items,
            "admission",
            cfg.batch_size,
            shuffle_seed=_epoch_seed(cfg.seed, epoch),
            max_stays=enc.dims.max_stays,
        ):
            loss, mcp, cl = admission_loss(enc, batch, cfg, rng)
            T.backward(loss)
            opt.step()
            sums += np.array([mcp, cl, loss.item()]) * len(batch)
            count += len(batch)
        mcp, cl, total = sums / count
        history.append({"epoch": epoch, "mcp": mcp, "cl": cl, "total": total})
        log.info("epoch=%d mcp=%.6f cl=%.6f total=%.6f", epoch, mcp, cl, total)
    return Checkpoint(
        stage="admission",
        params=enc.state_dict(),
        config=checkpoint_config(enc.dims, train=asdict(cfg), stage1_seed=stage1.seed),
        seed=cfg.seed,
        history=history,
    )


def admission_encoder_from_checkpoint(ckpt: Checkpoint, seed: int = 0) -> AdmissionEncoder:
    enc = AdmissionEncoder(dims_from_checkpoint(ckpt), seed=seed)
    enc.load_state_dict(ckpt.params)
    return enc


__all__ = [
    "AdmissionEncoder",
    "MCP_HEADS",
    "admission_fuse",
    "admission_loss",
    "aggregate_admission",
    "aggregate_stays",
    "cl_loss",
    "cosine_matrix",
    "embed_codes",
    "encode_admission",
    "mcp_loss",
    "mcp_objective",
    "nce_from_similarity",
    "pretrain_admission",
]
