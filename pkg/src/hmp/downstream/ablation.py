"""Training-size ablation: pretrained vs scratch arms over nested training subsamples."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Iterable, TextIO

import numpy as np

from hmp.checkpoint import Checkpoint
from hmp.config import FinetuneConfig, ModelDims
from hmp.data.records import Dataset
from hmp.downstream.finetune import EvalReport, TaskSpec, finetune
from hmp.errors import FractionTooSmall

TSV_COLUMNS = ("level", "task", "init", "fraction", "seed", "auroc", "aupr", "f1", "kappa", "epochs")


@dataclass(frozen=True)
class AblationRow:
    level: str
    task: str
    init: str
    fraction: float
    seed: int
    auroc: float
    aupr: float
    f1: float
    kappa: float
    epochs: int

    @classmethod
    def from_report(cls, spec: TaskSpec, report: EvalReport) -> "AblationRow":
        return cls(
            spec.level,
            spec.task,
            spec.init,
            spec.train_fraction,
            spec.seed,
            report.auroc,
            report.aupr,
            report.f1,
            report.kappa,
            report.epochs,
        )


def _check_fractions(fractions: Iterable[float]) -> list[float]:
    fractions = [float(f) for f in fractions]
    if not fractions:
        raise ValueError("at least one training fraction is required")
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"training fraction must lie in (0, 1], got {f}")
    return fractions


def ablation_run(
    ds: Dataset | list,
    ckpt: Checkpoint | None,
    spec: TaskSpec,
    fractions: Iterable[float],
    cfg: FinetuneConfig = FinetuneConfig(),
    dims: ModelDims | None = None,
) -> list[AblationRow]:
    """One row per fraction per arm, pretrained arm first.

    The pretrained arm uses ``spec.init`` (``a+s`` when the spec asks for
    scratch). Both arms share the seed, so they differ only in initialization.
    A subsample holding one class raises :class:`FractionTooSmall`.
    """
    pretrained = spec.init if spec.init != "scratch" else "a+s"
    rows = []
    for fraction in _check_fractions(fractions):
        for init in (pretrained, "scratch"):
            arm = replace(spec, train_fraction=fraction, init=init)
            rows.append(AblationRow.from_report(arm, finetune(ds, ckpt, arm, cfg, dims)))
    return rows


def ablation_over_seeds(
    ds: Dataset | list,
    ckpt: Checkpoint | None,
    spec: TaskSpec,
    fractions: Iterable[float],
    seeds: Iterable[int] = range(5),
    cfg: FinetuneConfig = FinetuneConfig(),
    dims: ModelDims | None = None,
) -> list[AblationRow]:
    fractions = _check_fractions(fractions)
    rows = []
    for seed in seeds:
        rows.extend(ablation_run(ds, ckpt, replace(spec, seed=int(seed)), fractions, cfg, dims))
    return rows


def mean_by_arm(rows: Iterable[AblationRow], metric: str = "auroc") -> dict[tuple[str, float], float]:
    """Mean of ``metric`` keyed by (init, fraction)."""
    groups = defaultdict(list)
    for row in rows:
        groups[(row.init, row.fraction)].append(getattr(row, metric))
    return {k: float(np.mean(v)) for k, v in groups.items()}


def _fmt(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def write_tsv(rows: Iterable[AblationRow], out: TextIO):
    writer = csv.writer(out, delimiter="\t", lineterminator="\n")
    writer.writerow(TSV_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(getattr(row, c)) for c in TSV_COLUMNS])


def rows_to_tsv(rows: Iterable[AblationRow]) -> str:
    buf = io.StringIO()
    write_tsv(rows, buf)
    return buf.getvalue()


def read_tsv(text: str) -> list[AblationRow]:
    reader = csv.reader(io.StringIO(text), delimiter="\t")
    header = next(reader, None)
    if tuple(header or ()) != TSV_COLUMNS:
        raise ValueError(f"unexpected results header: {header}")
    casts = (str, str, str, float, int, float, float, float, float, int)
    return [AblationRow(*(cast(v) for cast, v in zip(casts, line))) for line in reader if line]


__all__ = [
    "AblationRow",
    "FractionTooSmall",
    "TSV_COLUMNS",
    "ablation_over_seeds",
    "ablation_run",
    "mean_by_arm",
    "read_tsv",
    "rows_to_tsv",
    "write_tsv",
]
