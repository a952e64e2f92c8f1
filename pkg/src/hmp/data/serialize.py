"""Line-oriented text format for datasets.

Line 1 is a header carrying the extents, then one patient per line::

    hmp-dataset v1;T=16;df=32;ddem=12;C=128;G=64;M=3
    demographics=0,1,...;risk=0;admissions=[{icd=3,9;drugs=1;note=5,77;readmit=0;stays=[{labels=arf:0,shock:0,mort:1;rows=0,0.25|...}]} ...]

Reals are written with ``repr`` so a round trip is exact. An empty dataset
is written as an empty file.
"""

from __future__ import annotations

import os

import numpy as np

from hmp.data.records import (
    AdmissionRecord,
    Dataset,
    DatasetDims,
    PatientRecord,
    StayRecord,
)
from hmp.errors import FormatError, IoError

MAGIC = "hmp-dataset v1"
_LABEL_KEYS = (("arf", "arf"), ("shock", "shock"), ("mortality", "mort"))


def _fmt_real(v: float) -> str:
    return "0" if v == 0.0 else repr(float(v))


def _csv_active(vec: np.ndarray) -> str:
    return ",".join(str(int(i)) for i in np.flatnonzero(vec))


def _fmt_stay(stay: StayRecord) -> str:
    labels = ",".join(f"{short}:{int(stay.labels.get(key, 0))}" for key, short in _LABEL_KEYS)
    rows = "|".join(",".join(_fmt_real(v) for v in row) for row in stay.features)
    return f"{{labels={labels};rows={rows}}}"


def _fmt_admission(adm: AdmissionRecord) -> str:
    stays = " ".join(_fmt_stay(s) for s in adm.stays)
    note = ",".join(str(int(t)) for t in adm.note_tokens)
    return (
        f"{{icd={_csv_active(adm.icd)};drugs={_csv_active(adm.drugs)};note={note};"
        f"readmit={int(adm.readmit)};stays=[{stays}]}}"
    )


def format_patient(p: PatientRecord) -> str:
    dem = ",".join(str(int(v)) for v in p.demographics)
    adms = " ".join(_fmt_admission(a) for a in p.admissions)
    return f"demographics={dem};risk={int(p.risk)};admissions=[{adms}]"


def format_header(dims: DatasetDims) -> str:
    return (
        f"{MAGIC};T={dims.T};df={dims.d_f};ddem={dims.d_dem};"
        f"C={dims.n_icd};G={dims.n_drug};M={dims.max_stays}"
    )


def save_dataset(ds: Dataset, path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            if not ds.patients:
                return
            if ds.dims is None:
                raise ValueError("a non-empty dataset needs dims to be saved")
            fh.write(format_header(ds.dims) + "\n")
            for p in ds.patients:
                fh.write(format_patient(p) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {os.fspath(path)}: {exc}") from exc


class _Cursor:
    def __init__(self, text: str, line: int):
        self.text = text
        self.pos = 0
        self.line = line

    def fail(self, msg: str):
        raise FormatError(f"{msg} at column {self.pos + 1}", line=self.line)

    def expect(self, lit: str):
        if not self.text.startswith(lit, self.pos):
            self.fail(f"expected {lit!r}")
        self.pos += len(lit)

    def until(self, stop: str) -> str:
        end = self.text.find(stop, self.pos)
        if end < 0:
            self.fail(f"missing {stop!r}")
        out = self.text[self.pos : end]
        self.pos = end
        return out

    def skip_spaces(self):
        while self.pos < len(self.text) and self.text[self.pos] == " ":
            self.pos += 1

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def ints(self, raw: str, what: str) -> list[int]:
        if raw == "":
            return []
        try:
            return [int(x) for x in raw.split(",")]
        except ValueError:
            self.fail(f"bad integer list for {what}")

    def bit(self, raw: str, what: str) -> int:
        if raw not in ("0", "1"):
            self.fail(f"{what} must be 0 or 1, got {raw!r}")
        return int(raw)


def _multi_hot(cur: _Cursor, idx: list[int], extent: int, what: str) -> np.ndarray:
    out = np.zeros(extent)
    for i in idx:
        if not 0 <= i < extent:
            cur.fail(f"{what} index {i} outside [0, {extent})")
        out[i] = 1.0
    return out


def _parse_stay(cur: _Cursor, dims: DatasetDims) -> StayRecord:
    cur.expect("{labels=")
    labels = {}
    raw = cur.until(";")
    parts = dict(item.split(":", 1) for item in raw.split(",") if ":" in item)
    for key, short in _LABEL_KEYS:
        if short not in parts:
            cur.fail(f"missing label {short}")
        labels[key] = cur.bit(parts[short], short)
    cur.expect(";rows=")
    raw = cur.until("}")
    cur.expect("}")
    rows = raw.split("|")
    if len(rows) != dims.T:
        cur.fail(f"stay has {len(rows)} rows, expected {dims.T}")
    try:
        features = np.array([[float(v) for v in r.split(",")] for r in rows], dtype=np.float64)
    except ValueError:
        cur.fail("bad real in stay rows")
    if features.shape != (dims.T, dims.d_f):
        cur.fail(f"stay rows must have {dims.d_f} values each")
    if not np.all(np.isfinite(features)):
        cur.fail("non-finite feature value")
    return StayRecord(features=features, labels=labels)


def _parse_admission(cur: _Cursor, dims: DatasetDims) -> AdmissionRecord:
    cur.expect("{icd=")
    icd = _multi_hot(cur, cur.ints(cur.until(";"), "icd"), dims.n_icd, "icd")
    cur.expect(";drugs=")
    drugs = _multi_hot(cur, cur.ints(cur.until(";"), "drugs"), dims.n_drug, "drug")
    cur.expect(";note=")
    note = cur.ints(cur.until(";"), "note")
    cur.expect(";readmit=")
    readmit = cur.bit(cur.until(";"), "readmit")
    cur.expect(";stays=[")
    stays = []
    while True:
        cur.skip_spaces()
        if cur.peek() == "]":
            cur.expect("]")
            break
        stays.append(_parse_stay(cur, dims))
    cur.expect("}")
    if not 1 <= len(stays) <= dims.max_stays:
        cur.fail(f"admission has {len(stays)} stays, expected 1..{dims.max_stays}")
    if not icd.any():
        cur.fail("admission without any ICD code")
    return AdmissionRecord(stays=stays, icd=icd, drugs=drugs, note_tokens=note, readmit=readmit)


def parse_patient(text: str, dims: DatasetDims, line: int = 0) -> PatientRecord:
    cur = _Cursor(text, line)
    cur.expect("demographics=")
    dem = cur.ints(cur.until(";"), "demographics")
    if len(dem) != dims.d_dem or any(v not in (0, 1) for v in dem):
        cur.fail(f"demographics must be {dims.d_dem} values in {{0,1}}")
    cur.expect(";risk=")
    risk = cur.bit(cur.until(";"), "risk")
    cur.expect(";admissions=[")
    admissions = []
    while True:
        cur.skip_spaces()
        if cur.peek() == "]":
            cur.expect("]")
            break
        if cur.peek() == "":
            cur.fail("unterminated admission list")
        admissions.append(_parse_admission(cur, dims))
    if cur.pos != len(text):
        cur.fail("trailing characters")
    if not admissions:
        cur.fail("patient without admissions")
    return PatientRecord(demographics=np.array(dem, dtype=np.float64), admissions=admissions, risk=risk)


def parse_header(text: str) -> DatasetDims:
    fields = text.split(";")
    if fields[0] != MAGIC:
        raise FormatError(f"expected header starting with {MAGIC!r}", line=1)
    try:
        kv = dict(f.split("=", 1) for f in fields[1:])
        return DatasetDims(
            T=int(kv["T"]),
            d_f=int(kv["df"]),
            d_dem=int(kv["ddem"]),
            n_icd=int(kv["C"]),
            n_drug=int(kv["G"]),
            max_stays=int(kv["M"]),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad header field: {exc}", line=1) from None


def load_dataset(path) -> Dataset:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
    except OSError as exc:
        raise IoError(f"cannot read {os.fspath(path)}: {exc}") from exc
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        return Dataset(patients=[], dims=None)
    dims = parse_header(lines[0])
    patients = [parse_patient(text, dims, line=i) for i, text in enumerate(lines[1:], start=2)]
    return Dataset(patients=patients, dims=dims)
