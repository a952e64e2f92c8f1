"""Flatten the hierarchy to one level and cut it into padded batches."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from hmp.data.records import AdmissionRecord, Dataset, PatientRecord, StayRecord
from hmp.errors import EmptyDataset

LEVELS = ("stay", "admission", "patient")


@dataclass(eq=False)
class StayBatch:
    features: np.ndarray  # [B, T, d_f]
    demographics: np.ndarray  # [B, d_dem]
    labels: dict  # task -> [B]

    def __len__(self):
        return self.features.shape[0]


@dataclass(eq=False)
class AdmissionBatch:
    stays: np.ndarray  # [B, M, T, d_f], zero where absent
    presence: np.ndarray  # [B, M], 1 for real stays
    demographics: np.ndarray  # [B, d_dem]
    icd: np.ndarray  # [B, |C|]
    drugs: np.ndarray  # [B, |G|]
    note_tokens: list  # B token lists
    readmit: np.ndarray  # [B]

    def __len__(self):
        return self.stays.shape[0]


@dataclass(eq=False)
class PatientBatch:
    icd: np.ndarray  # [B, N_max, |C|], zero-padded admissions
    presence: np.ndarray  # [B, N_max]
    demographics: np.ndarray
    risk: np.ndarray

    def __len__(self):
        return self.icd.shape[0]


def stay_batch(items: list[tuple[StayRecord, np.ndarray]]) -> StayBatch:
    feats = np.stack([s.features for s, _ in items])
    dem = np.stack([d for _, d in items])
    tasks = items[0][0].labels.keys() if items else ()
    labels = {t: np.array([s.labels[t] for s, _ in items], dtype=np.float64) for t in tasks}
    return StayBatch(features=feats, demographics=dem, labels=labels)


def admission_batch(items: list[tuple[AdmissionRecord, np.ndarray]], max_stays: int) -> AdmissionBatch:
    first = items[0][0]
    T, d_f = first.stays[0].features.shape
    B = len(items)
    stays = np.zeros((B, max_stays, T, d_f))
    presence = np.zeros((B, max_stays))
    for i, (adm, _) in enumerate(items):
        for j, stay in enumerate(adm.stays[:max_stays]):
            stays[i, j] = stay.features
            presence[i, j] = 1.0
    return AdmissionBatch(
        stays=stays,
        presence=presence,
        demographics=np.stack([d for _, d in items]),
        icd=np.stack([a.icd for a, _ in items]),
        drugs=np.stack([a.drugs for a, _ in items]),
        note_tokens=[list(a.note_tokens) for a, _ in items],
        readmit=np.array([a.readmit for a, _ in items], dtype=np.float64),
    )


def patient_batch(patients: list[PatientRecord]) -> PatientBatch:
    n_max = max(len(p.admissions) for p in patients)
    n_icd = patients[0].admissions[0].icd.size
    icd = np.zeros((len(patients), n_max, n_icd))
    presence = np.zeros((len(patients), n_max))
    for i, p in enumerate(patients):
        for j, adm in enumerate(p.admissions):
            icd[i, j] = adm.icd
            presence[i, j] = 1.0
    return PatientBatch(
        icd=icd,
        presence=presence,
        demographics=np.stack([p.demographics for p in patients]),
        risk=np.array([p.risk for p in patients], dtype=np.float64),
    )


def flatten(ds: Dataset, level: str) -> list:
    if level == "stay":
        return ds.stays()
    if level == "admission":
        return ds.admissions()
    if level == "patient":
        return list(ds.patients)
    raise ValueError(f"unknown level {level!r}; expected one of {LEVELS}")


def collate(items: list, level: str, max_stays: int | None = None):
    if level == "stay":
        return stay_batch(items)
    if level == "admission":
        if max_stays is None:
            max_stays = max(len(a.stays) for a, _ in items)
        return admission_batch(items, max_stays)
    return patient_batch(items)


def batch_iter(
    ds: Dataset | list,
    level: str,
    batch_size: int,
    shuffle_seed: int | None = None,
    max_stays: int | None = None,
) -> Iterator:
    """Yield batches of ``batch_size`` (last one ragged) at the requested level.

    ``ds`` may be a :class:`Dataset` or an already flattened item list.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    items = flatten(ds, level) if isinstance(ds, Dataset) else list(ds)
    if not items:
        raise EmptyDataset(f"no {level} records to batch")
    if max_stays is None and isinstance(ds, Dataset) and ds.dims is not None:
        max_stays = ds.dims.max_stays
    order = np.arange(len(items))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(items))
    for start in range(0, len(items), batch_size):
        yield collate([items[i] for i in order[start : start + batch_size]], level, max_stays)
