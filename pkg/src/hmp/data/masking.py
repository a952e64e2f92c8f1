"""Random masking of multi-hot code vectors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(eq=False)
class MaskPlan:
    kept: np.ndarray  # original with masked positions zeroed
    indicator: np.ndarray  # 1 exactly at masked positions

    @property
    def n_masked(self) -> int:
        return int(self.indicator.sum())


def mask_count(rate: float, active: int) -> int:
    """ceil(rate * active), with the product rounded first so 0.15 * 20 is 3, not 4."""
    return min(active, math.ceil(round(rate * active, 9)))


def mask_codes(codes: np.ndarray, rate: float, rng: np.random.Generator) -> MaskPlan:
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"mask rate must be in [0, 1], got {rate}")
    codes = np.asarray(codes, dtype=np.float64)
    active = np.flatnonzero(codes)
    indicator = np.zeros_like(codes)
    n = mask_count(rate, active.size)
    if n:
        indicator[rng.choice(active, size=n, replace=False)] = 1.0
    return MaskPlan(kept=codes - indicator, indicator=indicator)
