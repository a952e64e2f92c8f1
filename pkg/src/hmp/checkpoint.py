"""Named-parameter checkpoints: JSON manifest, blank line, float32 payload.

The payload holds each parameter as little-endian float32 in manifest order.
The manifest records the payload length and its CRC32, so truncation or a
flipped byte is caught on load.
"""

from __future__ import annotations

import json
import math
import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from hmp.errors import ChecksumError, FormatError, IoError, StageMismatch

FORMAT = "hmp-checkpoint v1"
STAGES = ("stay", "admission")

# Parameter groups by name prefix, shared by every model that loads checkpoints.
STAY_ENCODER = ("stay.lstm_enc.", "stay.demo_mlp.", "stay.fusion.")
STAY_DECODER = ("stay.lstm_dec.",)
ADMISSION_ENCODER = ("stay_agg.", "icd_mlp.", "drug_mlp.", "note_proj.", "adm_fusion.")
MCP_HEADS = ("mcp_icd.", "mcp_drug.")
ICD_EMBEDDING = ("icd_mlp.",)


def select(names, prefixes) -> list[str]:
    return [n for n in names if n.startswith(tuple(prefixes))]


@dataclass(eq=False)
class Checkpoint:
    stage: str
    params: dict  # name -> float64 array
    config: dict = field(default_factory=dict)
    seed: int = 0
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")

    def require(self, *stages: str):
        if self.stage not in stages:
            raise StageMismatch(f"checkpoint stage is {self.stage!r}, expected one of {list(stages)}")
        return self

    def subset(self, prefixes) -> dict:
        return {n: self.params[n] for n in select(self.params, prefixes)}


def _payload(params: dict) -> bytes:
    return b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in params.values())


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    payload = _payload(ckpt.params)
    manifest = {
        "format": FORMAT,
        "stage": ckpt.stage,
        "seed": int(ckpt.seed),
        "config": ckpt.config,
        "history": ckpt.history,
        "params": [[name, list(np.shape(v))] for name, v in ckpt.params.items()],
        "payload_bytes": len(payload),
        "crc32": zlib.crc32(payload),
    }
    try:
        with open(path, "wb") as fh:
            fh.write(json.dumps(manifest, indent=2).encode("utf-8"))
            fh.write(b"\n\n")
            fh.write(payload)
    except OSError as exc:
        raise IoError(f"cannot write {os.fspath(path)}: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {os.fspath(path)}: {exc}") from exc
    cut = blob.find(b"\n\n")
    if cut < 0:
        raise FormatError("missing blank line after manifest")
    try:
        manifest = json.loads(blob[:cut].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}") from None
    if manifest.get("format") != FORMAT:
        raise FormatError(f"unsupported checkpoint format {manifest.get('format')!r}")
    payload = blob[cut + 2 :]
    expected = sum(4 * math.prod(shape) for _, shape in manifest["params"])
    if len(payload) != expected or manifest.get("payload_bytes") != expected:
        raise FormatError(f"payload is {len(payload)} bytes, manifest implies {expected}")
    if zlib.crc32(payload) != manifest["crc32"]:
        raise ChecksumError("payload checksum mismatch")
    params = {}
    offset = 0
    for name, shape in manifest["params"]:
        n = math.prod(shape)
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset)
        params[name] = arr.astype(np.float64).reshape(shape)
        offset += 4 * n
    return Checkpoint(
        stage=manifest["stage"],
        params=params,
        config=manifest.get("config", {}),
        seed=manifest.get("seed", 0),
        history=manifest.get("history", []),
    )
