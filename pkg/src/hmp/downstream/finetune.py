"""Supervised fine-tuning at stay, admission and patient level.

Each level pairs an encoder with a one-unit linear head trained on binary
cross-entropy with SGD and early stopping on validation loss. Data are
split 8:1:1 by a split seed that does not depend on the run seed, so test
membership is the same for every run and every training fraction.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from hmp import tensor as T
from hmp.admission import AdmissionEncoder, encode_admission
from hmp.checkpoint import (
    ADMISSION_ENCODER,
    ICD_EMBEDDING,
    MCP_HEADS,
    STAY_DECODER,
    STAY_ENCODER,
    Checkpoint,
    select,
)
from hmp.config import FINETUNE_GRID, FinetuneConfig, ModelDims
from hmp.data.batching import AdmissionBatch, PatientBatch, StayBatch, batch_iter, collate, flatten
from hmp.data.records import Dataset
from hmp.downstream.metrics import auroc, aupr, f1_kappa
from hmp.errors import DegenerateLabels, FractionTooSmall, StageMismatch
from hmp.nn import LSTM, Linear, Module, make_optimizer, mlp_forward
from hmp.stay import StayEncoder, dims_from_checkpoint
from hmp.tensor import Tensor

LEVEL_TASKS = {
    "stay": ("arf", "shock", "mortality"),
    "admission": ("readmission",),
    "patient": ("risk",),
}
INITS = ("a+s", "s", "a", "scratch")

# (level, init) -> (accepted checkpoint stages, parameter prefixes loaded)
LOAD_RULES = {
    ("stay", "a+s"): (("admission",), STAY_ENCODER),
    ("stay", "s"): (("stay", "admission"), STAY_ENCODER),
    ("admission", "a+s"): (("admission",), STAY_ENCODER + ADMISSION_ENCODER),
    ("admission", "s"): (("stay", "admission"), STAY_ENCODER),
    ("admission", "a"): (("admission",), ADMISSION_ENCODER),
    ("patient", "a+s"): (("admission",), ICD_EMBEDDING),
    ("patient", "a"): (("admission",), ICD_EMBEDDING),
}


def normalize_init(init: str) -> str:
    init = init.removeprefix("pretrained_").strip("{}")
    if init not in INITS:
        raise ValueError(f"unknown init {init!r}; expected one of {INITS}")
    return init


@dataclass(frozen=True)
class TaskSpec:
    level: str
    task: str
    train_fraction: float = 1.0
    seed: int = 0
    init: str = "a+s"
    split_seed: int = 0

    def __post_init__(self):
        if self.level not in LEVEL_TASKS:
            raise ValueError(f"unknown level {self.level!r}")
        if self.task not in LEVEL_TASKS[self.level]:
            raise ValueError(f"task {self.task!r} does not belong to level {self.level!r}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must be in (0, 1]")
        object.__setattr__(self, "init", normalize_init(self.init))


@dataclass
class EvalReport:
    auroc: float
    aupr: float
    f1: float
    kappa: float
    epochs: int
    best_epoch: int
    history: list = field(default_factory=list)
    loaded: list = field(default_factory=list)
    n_train: int = 0
    n_test: int = 0


class StayClassifier(Module):
    level = "stay"

    def __init__(self, dims: ModelDims, seed: int = 0):
        self.dims = dims
        self.stay = StayEncoder(dims)
        self.head = Linear(dims.d_r, 1)
        self.reset_parameters(seed)

    def trainable(self) -> dict:
        return {k: v for k, v in self.parameters().items() if not k.startswith(STAY_DECODER)}

    def represent(self, batch: StayBatch) -> Tensor:
        return self.stay.encode(Tensor(batch.features), Tensor(batch.demographics))

    def logits(self, batch: StayBatch) -> Tensor:
        return T.reshape(self.head(self.represent(batch)), (len(batch),))


class AdmissionClassifier(AdmissionEncoder):
    level = "admission"

    def __init__(self, dims: ModelDims, seed: int = 0):
        super().__init__(dims)
        self.head = Linear(dims.d_r, 1)
        self.reset_parameters(seed)

    def trainable(self) -> dict:
        return super().trainable(skip=STAY_DECODER + MCP_HEADS)

    def represent(self, batch: AdmissionBatch) -> Tensor:
        return encode_admission(self, batch)

    def logits(self, batch: AdmissionBatch) -> Tensor:
        return T.reshape(self.head(self.represent(batch)), (len(batch),))


class PatientClassifier(Module):
    """Per-admission ICD embedding, an LSTM over admissions, then the head."""

    level = "patient"

    def __init__(self, dims: ModelDims, seed: int = 0):
        self.dims = dims
        self.icd_mlp = Linear(dims.n_icd, dims.d_r)
        self.visit_lstm = LSTM(dims.d_r, dims.d_r)
        self.head = Linear(dims.d_r, 1)
        self.reset_parameters(seed)

    def trainable(self) -> dict:
        return self.parameters()

    def represent(self, batch: PatientBatch) -> Tensor:
        visits = mlp_forward(self.icd_mlp, Tensor(batch.icd))
        return self.visit_lstm.forward(visits, mask=batch.presence)[0]

    def logits(self, batch: PatientBatch) -> Tensor:
        return T.reshape(self.head(self.represent(batch)), (len(batch),))


MODELS = {"stay": StayClassifier, "admission": AdmissionClassifier, "patient": PatientClassifier}


def build_model(level: str, dims: ModelDims, seed: int) -> Module:
    return MODELS[level](dims, seed=seed)


def apply_init(model: Module, level: str, init: str, ckpt: Checkpoint | None) -> list[str]:
    """Load the parameter subset ``init`` prescribes for ``level``; returns the loaded names."""
    init = normalize_init(init)
    if init == "scratch":
        return []
    if (level, init) not in LOAD_RULES:
        raise ValueError(f"init {init!r} is not defined for level {level!r}")
    if ckpt is None:
        raise StageMismatch(f"init {init!r} needs a checkpoint")
    stages, prefixes = LOAD_RULES[(level, init)]
    ckpt.require(*stages)
    names = select(ckpt.params, prefixes)
    return model.load_state_dict(ckpt.params, names=names)


def item_labels(items: list, level: str, task: str) -> np.ndarray:
    if level == "stay":
        return np.array([s.labels[task] for s, _ in items], dtype=np.float64)
    if level == "admission":
        return np.array([a.readmit for a, _ in items], dtype=np.float64)
    return np.array([p.risk for p in items], dtype=np.float64)


def split_indices(n: int, split_seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """8:1:1 train/valid/test index split, each part in ascending order."""
    perm = np.random.default_rng(split_seed).permutation(n)
    n_test = max(1, int(round(0.1 * n)))
    n_val = max(1, int(round(0.1 * n)))
    test = np.sort(perm[:n_test])
    val = np.sort(perm[n_test : n_test + n_val])
    train = np.sort(perm[n_test + n_val :])
    return train, val, test


def subsample(train_idx: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Nested subsample: for one seed, smaller fractions are subsets of larger ones."""
    if fraction >= 1.0:
        return np.array(train_idx)
    k = max(1, int(math.ceil(fraction * len(train_idx))))
    perm = np.random.default_rng([seed, 7919]).permutation(len(train_idx))
    return np.sort(np.asarray(train_idx)[perm[:k]])


def _bce(logits: Tensor, y: np.ndarray) -> Tensor:
    # mean of softplus(z) - y z, i.e. cross-entropy on sigmoid(z)
    return T.mean(T.sub(T.softplus(logits), T.mul(logits, Tensor(y))))


def predict_scores(model, items: list, level: str, chunk: int = 256) -> np.ndarray:
    max_stays = getattr(getattr(model, "dims", None), "max_stays", None)
    out = []
    with T.no_grad():
        for start in range(0, len(items), chunk):
            batch = collate(items[start : start + chunk], level, max_stays)
            z = model.logits(batch).data
            out.append(1.0 / (1.0 + np.exp(-z)))
    return np.concatenate(out) if out else np.zeros(0)


def _val_loss(model, items, y, level) -> float:
    p = np.clip(predict_scores(model, items, level), 1e-12, 1 - 1e-12)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def _safe_auroc(scores, y) -> float:
    try:
        return auroc(scores, y)
    except DegenerateLabels:
        return float("nan")


def train_classifier(
    model,
    train_items: list,
    y_train: np.ndarray,
    val_items: list,
    y_val: np.ndarray,
    cfg: FinetuneConfig,
    seed: int,
    monitor=None,
) -> tuple[int, int, list]:
    """SGD with early stopping; restores the best-validation weights.

    ``monitor(model)`` returns a dict merged into each epoch's history row.
    Returns (epochs run, best epoch, history).
    """
    level = model.level
    max_stays = getattr(getattr(model, "dims", None), "max_stays", None)
    params = model.trainable()
    opt = make_optimizer(cfg.optimizer, params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    labelled = list(zip(train_items, y_train))
    best_loss, best_state, best_epoch, wait = math.inf, None, 0, 0
    history = []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(labelled))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [labelled[i] for i in order[start : start + cfg.batch_size]]
            batch = collate([item for item, _ in chunk], level, max_stays)
            loss = _bce(model.logits(batch), np.array([label for _, label in chunk]))
            T.backward(loss)
            opt.step()
            total += loss.item() * len(chunk)
        val_loss = _val_loss(model, val_items, y_val, level)
        row = {"epoch": epoch, "train_loss": total / len(labelled), "val_loss": val_loss}
        if monitor is not None:
            row.update(monitor(model))
        history.append(row)
        if val_loss < best_loss:
            best_loss, best_epoch, wait = val_loss, epoch, 0
            best_state = {k: v.data.copy() for k, v in params.items()}
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    if best_state is not None:
        for k, v in params.items():
            v.data[...] = best_state[k]
    return epoch, best_epoch, history


def _prepare(ds: Dataset | list, spec: TaskSpec):
    items = flatten(ds, spec.level) if isinstance(ds, Dataset) else list(ds)
    y = item_labels(items, spec.level, spec.task)
    train, val, test = split_indices(len(items), spec.split_seed)
    train = subsample(train, spec.train_fraction, spec.seed)
    if len(np.unique(y[train])) < 2:
        raise FractionTooSmall(
            f"training subsample at fraction {spec.train_fraction} has a single class"
        )
    pick = lambda idx: [items[i] for i in idx]  # noqa: E731
    return (pick(train), y[train]), (pick(val), y[val]), (pick(test), y[test])


def _dims_for(ds, ckpt: Checkpoint | None, d_r: int | None) -> ModelDims:
    if ckpt is not None:
        return dims_from_checkpoint(ckpt)
    if not isinstance(ds, Dataset) or ds.dims is None:
        raise ValueError("model extents need a checkpoint or a Dataset with dims")
    dd = ds.dims
    return ModelDims(dd.T, dd.d_f, dd.d_dem, dd.n_icd, dd.n_drug, ModelDims.d_note, dd.max_stays, d_r or ModelDims.d_r)


def finetune(
    ds: Dataset | list,
    ckpt: Checkpoint | None,
    spec: TaskSpec,
    cfg: FinetuneConfig = FinetuneConfig(),
    dims: ModelDims | None = None,
    grid: bool = False,
) -> EvalReport:
    """Split, initialize per ``spec.init``, train, and score on the test split."""
    if grid:
        return _grid_finetune(ds, ckpt, spec, cfg, dims)
    dims = dims or _dims_for(ds, ckpt, None)
    (tr_x, tr_y), (va_x, va_y), (te_x, te_y) = _prepare(ds, spec)
    model = build_model(spec.level, dims, seed=spec.seed)
    loaded = apply_init(model, spec.level, spec.init, ckpt)

    def monitor(m):
        scores = predict_scores(m, te_x, spec.level)
        f1, _ = f1_kappa(scores, te_y, cfg.threshold)
        return {"test_f1": f1, "test_auroc": _safe_auroc(scores, te_y)}

    epochs, best_epoch, history = train_classifier(model, tr_x, tr_y, va_x, va_y, cfg, spec.seed, monitor)
    scores = predict_scores(model, te_x, spec.level)
    f1, kappa = f1_kappa(scores, te_y, cfg.threshold)
    return EvalReport(
        auroc=auroc(scores, te_y),
        aupr=aupr(scores, te_y),
        f1=f1,
        kappa=kappa,
        epochs=epochs,
        best_epoch=best_epoch,
        history=history,
        loaded=loaded,
        n_train=len(tr_x),
        n_test=len(te_x),
    )


def _grid_finetune(ds, ckpt, spec, cfg, dims) -> EvalReport:
    best = None
    for bs, lr in itertools.product(FINETUNE_GRID["batch_size"], FINETUNE_GRID["lr"]):
        report = finetune(ds, ckpt, spec, replace(cfg, batch_size=bs, lr=lr), dims)
        val = min(row["val_loss"] for row in report.history)
        if best is None or val < best[0]:
            best = (val, report)
    return best[1]


def finetune_stay(ds, ckpt, spec: TaskSpec, cfg: FinetuneConfig = FinetuneConfig(), **kw) -> EvalReport:
    if spec.level != "stay":
        raise StageMismatch("finetune_stay needs a stay-level task")
    return finetune(ds, ckpt, spec, cfg, **kw)


def finetune_admission(ds, ckpt, spec: TaskSpec, cfg: FinetuneConfig = FinetuneConfig(), **kw) -> EvalReport:
    if spec.level != "admission":
        raise StageMismatch("finetune_admission needs an admission-level task")
    return finetune(ds, ckpt, spec, cfg, **kw)


def finetune_patient(ds, ckpt, spec: TaskSpec, cfg: FinetuneConfig = FinetuneConfig(), **kw) -> EvalReport:
    if spec.level != "patient":
        raise StageMismatch("finetune_patient needs a patient-level task")
    return finetune(ds, ckpt, spec, cfg, **kw)


def epochs_to_fraction(history: list, final: float, frac: float = 0.95, key: str = "test_f1") -> int:
    """First epoch whose ``key`` reaches ``frac * final``."""
    target = frac * final
    for row in history:
        if row[key] >= target:
            return row["epoch"]
    return history[-1]["epoch"] if history else 0
