"""scikit-learn style wrappers around the pretraining stages and the fine-tuned classifiers.

Inputs are a :class:`~hmp.data.Dataset` or an already flattened item list
for the relevant level: ``(StayRecord, demographics)`` pairs,
``(AdmissionRecord, demographics)`` pairs, or ``PatientRecord`` objects.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from hmp import tensor as T
from hmp.admission import admission_encoder_from_checkpoint, encode_admission, pretrain_admission
from hmp.checkpoint import Checkpoint
from hmp.config import AdmissionTrainConfig, FinetuneConfig, ModelDims, StayTrainConfig
from hmp.data.batching import collate, flatten
from hmp.data.records import AdmissionRecord, Dataset, PatientRecord, StayRecord
from hmp.downstream.finetune import (
    LEVEL_TASKS,
    apply_init,
    build_model,
    item_labels,
    normalize_init,
    predict_scores,
    train_classifier,
)
from hmp.errors import EmptyDataset
from hmp.stay import pretrain_stay, stay_encoder_from_checkpoint

_RECORD = {"stay": StayRecord, "admission": AdmissionRecord}


def check_items(X, level: str) -> list:
    """Flatten ``X`` to ``level`` items and check each item's type."""
    items = flatten(X, level) if isinstance(X, Dataset) else list(X)
    if not items:
        raise EmptyDataset(f"no {level} items given")
    for k, item in enumerate(items):
        if level == "patient":
            ok = isinstance(item, PatientRecord)
        else:
            ok = isinstance(item, tuple) and len(item) == 2 and isinstance(item[0], _RECORD[level])
        if not ok:
            raise TypeError(f"item {k} is not a {level}-level item: {type(item).__name__}")
    return items


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size != n:
        raise ValueError(f"got {y.size} labels for {n} items")
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ValueError("labels must be 0/1")
    if np.unique(y).size < 2:
        raise ValueError("training labels hold a single class")
    return y


def _dims(X, d_r: int, checkpoint: Checkpoint | None = None) -> ModelDims:
    if checkpoint is not None:
        return ModelDims(**checkpoint.config["dims"])
    if not isinstance(X, Dataset) or X.dims is None:
        raise ValueError("pass a Dataset (with extents) or a checkpoint to size the model")
    d = X.dims
    return ModelDims(d.T, d.d_f, d.d_dem, d.n_icd, d.n_drug, ModelDims.d_note, d.max_stays, d_r)


def _encode_chunks(items: list, level: str, encode, max_stays=None, chunk: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for start in range(0, len(items), chunk):
            out.append(encode(collate(items[start : start + chunk], level, max_stays)).data)
    return np.concatenate(out)


class StayPretrainer(TransformerMixin, BaseEstimator):
    """Stage 1: fit learns the stay encoder by reconstruction; transform yields stay embeddings."""

    def __init__(self, d_r: int = 16, lr: float = 5e-3, epochs: int = 20, batch_size: int = 32,
                 weight_decay: float = 1e-8, seed: int = 0):
        self.d_r = d_r
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.seed = seed

    def fit(self, X, y=None):
        dims = _dims(X, self.d_r)
        items = check_items(X, "stay")
        cfg = StayTrainConfig(self.lr, self.epochs, self.batch_size, self.weight_decay, self.seed)
        self.checkpoint_ = pretrain_stay(items, dims, cfg)
        self.history_ = self.checkpoint_.history
        self.encoder_ = stay_encoder_from_checkpoint(self.checkpoint_)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "encoder_")
        items = check_items(X, "stay")
        enc = self.encoder_
        return _encode_chunks(items, "stay", lambda b: enc.encode(T.Tensor(b.features), T.Tensor(b.demographics)))


class AdmissionPretrainer(TransformerMixin, BaseEstimator):
    """Stage 2: continues from a stage-1 checkpoint; transform yields admission embeddings."""

    def __init__(self, stage1: Checkpoint | None = None, lr: float = 3e-3, epochs: int = 30,
                 batch_size: int = 64, weight_decay: float = 1e-8, lam: float = 0.1,
                 tau: float = 0.1, mask_rate: float = 0.15, seed: int = 0):
        self.stage1 = stage1
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.lam = lam
        self.tau = tau
        self.mask_rate = mask_rate
        self.seed = seed

    def fit(self, X, y=None):
        if self.stage1 is None:
            raise ValueError("AdmissionPretrainer needs a stage-1 checkpoint")
        items = check_items(X, "admission")
        cfg = AdmissionTrainConfig(
            self.lr, self.epochs, self.batch_size, self.weight_decay,
            self.lam, self.tau, self.mask_rate, self.seed,
        )
        self.checkpoint_ = pretrain_admission(items, self.stage1, cfg)
        self.history_ = self.checkpoint_.history
        self.encoder_ = admission_encoder_from_checkpoint(self.checkpoint_)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "encoder_")
        items = check_items(X, "admission")
        enc = self.encoder_
        return _encode_chunks(items, "admission", lambda b: encode_admission(enc, b), enc.dims.max_stays)


class HierarchicalClassifier(ClassifierMixin, BaseEstimator):
    """Binary classifier for one task at one level, optionally initialized from a checkpoint.

    ``fit`` holds out ``validation_fraction`` of the items for early stopping.
    When ``y`` is omitted the task labels stored on the items are used.
    """

    def __init__(self, level: str = "stay", task: str = "arf", init: str = "a+s",
                 checkpoint: Checkpoint | None = None, d_r: int = 16, lr: float = 0.1,
                 batch_size: int = 32, weight_decay: float = 1e-2, max_epochs: int = 30,
                 patience: int = 5, threshold: float = 0.5, validation_fraction: float = 1 / 9,
                 seed: int = 0):
        self.level = level
        self.task = task
        self.init = init
        self.checkpoint = checkpoint
        self.d_r = d_r
        self.lr = lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.max_epochs = max_epochs
        self.patience = patience
        self.threshold = threshold
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _validate_params(self):
        if self.level not in LEVEL_TASKS or self.task not in LEVEL_TASKS[self.level]:
            raise ValueError(f"task {self.task!r} is not defined at level {self.level!r}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")
        return normalize_init(self.init) if self.checkpoint is not None else "scratch"

    def fit(self, X, y=None):
        init = self._validate_params()
        items = check_items(X, self.level)
        y = item_labels(items, self.level, self.task) if y is None else y
        y = check_labels(y, len(items))
        perm = np.random.default_rng([self.seed, 17]).permutation(len(items))
        n_val = max(1, int(round(self.validation_fraction * len(items))))
        val, train = np.sort(perm[:n_val]), np.sort(perm[n_val:])
        dims = _dims(X, self.d_r, self.checkpoint)
        model = build_model(self.level, dims, seed=self.seed)
        self.loaded_ = apply_init(model, self.level, init, self.checkpoint)
        cfg = FinetuneConfig(self.lr, self.batch_size, self.weight_decay, self.max_epochs,
                             self.patience, self.threshold)
        self.n_epochs_, self.best_epoch_, self.history_ = train_classifier(
            model,
            [items[i] for i in train],
            y[train],
            [items[i] for i in val],
            y[val],
            cfg,
            self.seed,
        )
        self.model_ = model
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        p = predict_scores(self.model_, check_items(X, self.level), self.level)
        return np.column_stack([1.0 - p, p])

    def decision_function(self, X) -> np.ndarray:
        p = np.clip(self.predict_proba(X)[:, 1], 1e-300, 1.0 - 1e-16)
        return np.log(p) - np.log1p(-p)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= self.threshold).astype(int)


__all__ = [
    "AdmissionPretrainer",
    "HierarchicalClassifier",
    "StayPretrainer",
    "check_items",
    "check_labels",
]
