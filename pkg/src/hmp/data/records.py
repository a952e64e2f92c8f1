"""Patient / admission / stay records."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STAY_TASKS = ("arf", "shock", "mortality")


@dataclass(eq=False)
class StayRecord:
    features: np.ndarray  # [T, d_f], values in [0, 1]
    labels: dict = field(default_factory=dict)  # task -> 0/1


@dataclass(eq=False)
class AdmissionRecord:
    stays: list
    icd: np.ndarray  # multi-hot [|C|]
    drugs: np.ndarray  # multi-hot [|G|]
    note_tokens: list
    readmit: int = 0


@dataclass(eq=False)
class PatientRecord:
    demographics: np.ndarray  # multi-hot [d_dem]
    admissions: list
    risk: int = 0


@dataclass(frozen=True)
class DatasetDims:
    T: int
    d_f: int
    d_dem: int
    n_icd: int
    n_drug: int
    max_stays: int


@dataclass(eq=False)
class Dataset:
    patients: list
    dims: DatasetDims | None = None

    def __len__(self):
        return len(self.patients)

    def stays(self) -> list[tuple[StayRecord, np.ndarray]]:
        """Every stay paired with its patient's demographics, in file order."""
        return [
            (stay, p.demographics)
            for p in self.patients
            for adm in p.admissions
            for stay in adm.stays
        ]

    def admissions(self) -> list[tuple[AdmissionRecord, np.ndarray]]:
        return [(adm, p.demographics) for p in self.patients for adm in p.admissions]


def _arrays_equal(a, b) -> bool:
    a, b = np.asarray(a), np.asarray(b)
    return a.shape == b.shape and bool(np.array_equal(a, b))


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    """Exact structural and value equality."""
    if a.dims != b.dims or len(a) != len(b):
        return False
    for pa, pb in zip(a.patients, b.patients):
        if pa.risk != pb.risk or not _arrays_equal(pa.demographics, pb.demographics):
            return False
        if len(pa.admissions) != len(pb.admissions):
            return False
        for aa, ab in zip(pa.admissions, pb.admissions):
            if (
                aa.readmit != ab.readmit
                or list(aa.note_tokens) != list(ab.note_tokens)
                or not _arrays_equal(aa.icd, ab.icd)
                or not _arrays_equal(aa.drugs, ab.drugs)
                or len(aa.stays) != len(ab.stays)
            ):
                return False
            for sa, sb in zip(aa.stays, ab.stays):
                if sa.labels != sb.labels or not _arrays_equal(sa.features, sb.features):
                    return False
    return True
