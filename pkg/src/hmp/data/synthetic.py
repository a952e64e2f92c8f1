"""Seeded generator of hierarchical EHR-like data.

Every modality is a noisy view of one latent vector per patient, perturbed
per admission and again per stay, so the modalities carry shared signal that
pretraining can pick up. Output is a pure function of the config.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, replace
from statistics import NormalDist

import numpy as np

from hmp.data.records import (
    AdmissionRecord,
    Dataset,
    DatasetDims,
    PatientRecord,
    StayRecord,
)

NOTE_VOCAB = 512
TOKENS_PER_CODE = 2

PREVALENCE = {
    "arf": 0.3,
    "shock": 0.2,
    "mortality": 0.1,
    "readmission": 0.25,
    "risk": 0.3,
}
LABEL_SHARPNESS = 4.0

ADMISSION_NOISE = 0.5
STAY_NOISE = 0.3


@dataclass(frozen=True)
class GenConfig:
    n_patients: int = 500
    max_admissions: int = 3
    max_stays: int = 3
    T: int = 16
    d_f: int = 32
    d_dem: int = 12
    n_icd: int = 128
    n_drug: int = 64
    d_note: int = 32
    latent_dim: int = 8
    sparsity: float = 0.3
    seed: int = 0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name in ("seed", "sparsity"):
                continue
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if not 0.0 < self.sparsity <= 1.0:
            raise ValueError(f"sparsity must be in (0, 1], got {self.sparsity}")

    @classmethod
    def paper(cls, **overrides) -> "GenConfig":
        """Full-size extents; only practical for shape checks on a handful of patients."""
        base = cls(T=48, d_f=1318, d_dem=73, n_icd=7686, n_drug=1701, d_note=768)
        return replace(base, **overrides)

    @property
    def dims(self) -> DatasetDims:
        return DatasetDims(self.T, self.d_f, self.d_dem, self.n_icd, self.n_drug, self.max_stays)


@dataclass
class Projections:
    demographics: np.ndarray
    observed: np.ndarray
    values: np.ndarray
    trend: np.ndarray
    icd: np.ndarray
    drugs: np.ndarray
    tasks: dict


def _draw_projections(rng: np.random.Generator, cfg: GenConfig) -> Projections:
    L = cfg.latent_dim

    def proj(rows):
        return rng.standard_normal((rows, L)) / math.sqrt(L)

    out = Projections(
        demographics=proj(cfg.d_dem),
        observed=proj(cfg.d_f),
        values=proj(cfg.d_f),
        trend=proj(cfg.d_f),
        icd=proj(cfg.n_icd),
        drugs=proj(cfg.n_drug),
        tasks={},
    )
    for task in PREVALENCE:
        w = rng.standard_normal(L)
        out.tasks[task] = w / np.linalg.norm(w)
    return out


def modality_projections(cfg: GenConfig) -> Projections:
    """The projection matrices ``generate_dataset`` uses for this config."""
    return _draw_projections(np.random.default_rng(cfg.seed), cfg)


def _latent_var(level: str) -> float:
    var = 1.0
    if level in ("admission", "stay"):
        var += ADMISSION_NOISE**2
    if level == "stay":
        var += STAY_NOISE**2
    return var


_LEVEL_OF = {
    "arf": "stay",
    "shock": "stay",
    "mortality": "stay",
    "readmission": "admission",
    "risk": "patient",
}


def _label(rng, w, z, task) -> int:
    # w is unit norm, so w.z ~ N(0, var(z)); center the logistic at the
    # quantile giving the target prevalence.
    sd = math.sqrt(_latent_var(_LEVEL_OF[task]))
    thr = NormalDist(0.0, sd).inv_cdf(1.0 - PREVALENCE[task])
    p = 1.0 / (1.0 + math.exp(-LABEL_SHARPNESS * (float(w @ z) - thr)))
    return int(rng.random() < p)


def _top_k(scores: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros(scores.size)
    out[np.argsort(-scores, kind="stable")[:k]] = 1.0
    return out


def note_tokens_for(icd: np.ndarray) -> list[int]:
    """Pseudo-note: a fixed pair of hashed token ids per active ICD code."""
    tokens = []
    for code in np.flatnonzero(icd):
        for j in range(TOKENS_PER_CODE):
            tokens.append(zlib.crc32(f"icd:{int(code)}:{j}".encode()) % NOTE_VOCAB)
    return tokens


def _make_stay(rng, proj: Projections, z_a: np.ndarray, cfg: GenConfig) -> StayRecord:
    z_s = z_a + STAY_NOISE * rng.standard_normal(cfg.latent_dim)
    k = max(1, int(math.floor(cfg.sparsity * cfg.d_f)))
    observed = np.argsort(-(proj.observed @ z_s + 0.5 * rng.standard_normal(cfg.d_f)), kind="stable")[:k]
    hours = np.linspace(-0.5, 0.5, cfg.T)[:, None]
    logits = 1.5 * (proj.values @ z_s)[None, :] + 2.0 * hours * (proj.trend @ z_s)[None, :]
    logits = logits + 0.1 * rng.standard_normal((cfg.T, cfg.d_f))
    values = 1.0 / (1.0 + np.exp(-logits))
    features = np.zeros((cfg.T, cfg.d_f))
    features[:, observed] = np.clip(values[:, observed], 0.0, 1.0)
    labels = {task: _label(rng, proj.tasks[task], z_s, task) for task in ("arf", "shock", "mortality")}
    return StayRecord(features=features, labels=labels)


def generate_dataset(cfg: GenConfig) -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    proj = _draw_projections(rng, cfg)
    L = cfg.latent_dim
    patients = []
    for _ in range(cfg.n_patients):
        z = rng.standard_normal(L)
        demographics = (proj.demographics @ z + 0.5 * rng.standard_normal(cfg.d_dem) > 0).astype(np.float64)
        admissions = []
        for _ in range(int(rng.integers(1, cfg.max_admissions + 1))):
            z_a = z + ADMISSION_NOISE * rng.standard_normal(L)
            stays = [_make_stay(rng, proj, z_a, cfg) for _ in range(int(rng.integers(1, cfg.max_stays + 1)))]
            k_icd = min(cfg.n_icd, int(rng.integers(3, 9)))
            k_drug = min(cfg.n_drug, int(rng.integers(2, 7)))
            icd = _top_k(2.0 * (proj.icd @ z_a) + rng.gumbel(size=cfg.n_icd), k_icd)
            drugs = _top_k(2.0 * (proj.drugs @ z_a) + rng.gumbel(size=cfg.n_drug), k_drug)
            admissions.append(
                AdmissionRecord(
                    stays=stays,
                    icd=icd,
                    drugs=drugs,
                    note_tokens=note_tokens_for(icd),
                    readmit=_label(rng, proj.tasks["readmission"], z_a, "readmission"),
                )
            )
        patients.append(
            PatientRecord(
                demographics=demographics,
                admissions=admissions,
                risk=_label(rng, proj.tasks["risk"], z, "risk"),
            )
        )
    return Dataset(patients=patients, dims=cfg.dims)
