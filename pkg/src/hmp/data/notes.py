"""Frozen pseudo-embedding for clinical note token lists."""

from __future__ import annotations

import hashlib
from functools import lru_cache

import numpy as np


def token_seed(token: int) -> int:
    return int.from_bytes(hashlib.blake2b(f"note-token:{int(token)}".encode(), digest_size=8).digest(), "little")


@lru_cache(maxsize=65536)
def _token_vector(token: int, d_note: int) -> np.ndarray:
    v = np.random.default_rng(token_seed(token)).standard_normal(d_note)
    v /= np.linalg.norm(v)
    v.setflags(write=False)
    return v


def token_vector(token: int, d_note: int) -> np.ndarray:
    return _token_vector(int(token), int(d_note))


def note_embed(note_tokens, d_note: int) -> np.ndarray:
    """Sum of unit per-token vectors divided by sqrt(count); zero for an empty note.

    Returns a plain array: the embedder is frozen and never enters the tape.
    """
    if d_note <= 0:
        raise ValueError("d_note must be positive")
    tokens = list(note_tokens)
    if not tokens:
        return np.zeros(d_note)
    total = np.zeros(d_note)
    # sorted so that the floating-point sum does not depend on token order
    for t in sorted(tokens):
        total += token_vector(t, d_note)
    return total / np.sqrt(len(tokens))
