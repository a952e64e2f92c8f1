"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from hmp.tensor import Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    worst: tuple | None = None  # (param index, flat coordinate)

    def __bool__(self):
        return self.passed


def rel_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def numeric_grad(forward: Callable[[], Tensor], param: Tensor, step: float = 1e-5) -> np.ndarray:
    flat = param.data.reshape(-1)
    out = np.zeros(flat.size)
    with no_grad():
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = forward().item()
            flat[k] = orig - step
            down = forward().item()
            flat[k] = orig
            out[k] = (up - down) / (2.0 * step)
    return out.reshape(param.shape)


def grad_check(
    forward: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    analytic: Sequence[np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``forward()`` against central differences.

    ``analytic`` overrides the tape gradients, which lets callers inject a
    deliberately wrong gradient to confirm the check fails.
    """
    if analytic is None:
        for p in params:
            p.zero_grad()
        backward(forward())
        analytic = [p.grad.copy() for p in params]
    worst_err, worst = 0.0, None
    for i, (p, a) in enumerate(zip(params, analytic)):
        n = numeric_grad(forward, p, step)
        a = np.asarray(a).reshape(-1)
        n = n.reshape(-1)
        err = np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))
        if err.size and err.max() > worst_err:
            worst_err = float(err.max())
            worst = (i, int(err.argmax()))
    return GradCheckReport(worst_err, worst_err <= tol, worst)
