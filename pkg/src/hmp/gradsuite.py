"""Finite-difference checks for every layer and training loss on tiny random instances."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from hmp import tensor as T
from hmp.admission import AdmissionEncoder, cl_loss, mcp_loss
from hmp.config import ModelDims
from hmp.data.batching import admission_batch, stay_batch
from hmp.data.synthetic import GenConfig, generate_dataset
from hmp.gradcheck import GradCheckReport, grad_check
from hmp.nn import LSTM, FusionBlock, Linear, Module
from hmp.stay import StayEncoder, stay_loss
from hmp.tensor import Tensor

TINY_GEN = dict(
    n_patients=3, max_admissions=2, max_stays=2, T=3, d_f=3, d_dem=2,
    n_icd=6, n_drug=5, d_note=4, latent_dim=2, sparsity=1.0,
)
TINY_DIMS = ModelDims(T=3, d_f=3, d_dem=2, n_icd=6, n_drug=5, d_note=4, max_stays=2, d_r=3)


@dataclass
class SuiteResult:
    layer: str
    seed: int
    report: GradCheckReport


def _jitter(module: Module, rng: np.random.Generator, scale: float = 0.1) -> list[Tensor]:
    # move biases and gains off their constant initial values
    params = list(module.parameters().values())
    for p in params:
        p.data += scale * rng.standard_normal(p.shape)
    return params


def _leaf(rng, *shape) -> Tensor:
    return Tensor(rng.uniform(-1.0, 1.0, size=shape), requires_grad=True)


def _weighted_sum(out: Tensor, w: np.ndarray) -> Tensor:
    return T.tsum(T.mul(out, Tensor(w)))


def check_linear(seed: int) -> GradCheckReport:
    rng = np.random.default_rng([seed, 1])
    layer = Linear(4, 3, seed=seed)
    x = _leaf(rng, 5, 4)
    w = rng.standard_normal((5, 3))
    return grad_check(lambda: _weighted_sum(layer(x), w), _jitter(layer, rng) + [x])


def check_lstm_step(seed: int) -> GradCheckReport:
    rng = np.random.default_rng([seed, 2])
    cell = LSTM(3, 4, seed=seed)
    x, h, c = _leaf(rng, 2, 3), _leaf(rng, 2, 4), _leaf(rng, 2, 4)
    wh, wc = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))

    def forward():
        pre = T.add(T.matmul(x, T.transpose(cell._stacked("W"))), cell._stacked("b"))
        h2, c2 = cell.step(pre, h, c, T.transpose(cell._stacked("U")))
        return T.add(_weighted_sum(h2, wh), _weighted_sum(c2, wc))

    return grad_check(forward, _jitter(cell, rng) + [x, h, c])


def check_lstm_sequence(seed: int) -> GradCheckReport:
    rng = np.random.default_rng([seed, 3])
    lstm = LSTM(3, 4, seed=seed)
    seq = _leaf(rng, 2, 5, 3)
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], dtype=np.float64)
    w = rng.standard_normal((2, 4))
    return grad_check(lambda: _weighted_sum(lstm.forward(seq, mask)[0], w), _jitter(lstm, rng) + [seq])


def check_fusion(seed: int) -> GradCheckReport:
    rng = np.random.default_rng([seed, 4])
    block = FusionBlock(4, seed=seed)
    tokens = _leaf(rng, 2, 3, 4)
    w = rng.standard_normal((2, 4))
    return grad_check(lambda: _weighted_sum(block(tokens), w), _jitter(block, rng) + [tokens])


def check_layer_norm(seed: int) -> GradCheckReport:
    rng = np.random.default_rng([seed, 5])
    x, gamma, beta = _leaf(rng, 3, 5), _leaf(rng, 5), _leaf(rng, 5)
    w = rng.standard_normal((3, 5))
    return grad_check(lambda: _weighted_sum(T.layer_norm(x, gamma, beta), w), [x, gamma, beta])


def _tiny_dataset(seed: int):
    return generate_dataset(GenConfig(seed=seed, **TINY_GEN))


def check_stay_loss(seed: int) -> GradCheckReport:
    rng = np.random.default_rng([seed, 6])
    enc = StayEncoder(TINY_DIMS, seed=seed)
    batch = stay_batch(_tiny_dataset(seed).stays()[:4])
    return grad_check(lambda: stay_loss(enc, batch), _jitter(enc, rng))


def _admission_setup(seed: int, salt: int):
    rng = np.random.default_rng([seed, salt])
    enc = AdmissionEncoder(TINY_DIMS, seed=seed)
    params = _jitter(enc, rng)
    # the stay encoder is covered by the stay-loss check; keep these checks fast
    params = [p for name, p in enc.parameters().items() if not name.startswith("stay.")]
    batch = admission_batch(_tiny_dataset(seed).admissions()[:3], TINY_DIMS.max_stays)
    return enc, params, batch


def check_mcp_loss(seed: int) -> GradCheckReport:
    enc, params, batch = _admission_setup(seed, 7)
    # a fresh stream per call keeps the mask fixed across perturbations
    return grad_check(lambda: mcp_loss(enc, batch, 0.5, np.random.default_rng(seed)), params)


def check_cl_loss(seed: int) -> GradCheckReport:
    enc, params, batch = _admission_setup(seed, 8)
    return grad_check(lambda: cl_loss(enc, batch, tau=0.5), params)


CHECKS: dict[str, Callable[[int], GradCheckReport]] = {
    "linear": check_linear,
    "lstm_step": check_lstm_step,
    "lstm_sequence": check_lstm_sequence,
    "fusion_block": check_fusion,
    "layer_norm": check_layer_norm,
    "stay_loss": check_stay_loss,
    "mcp_loss": check_mcp_loss,
    "cl_loss": check_cl_loss,
}


def gradient_suite(seeds: Iterable[int] = range(20), layers: Iterable[str] | None = None) -> list[SuiteResult]:
    names = list(CHECKS) if layers is None else list(layers)
    unknown = set(names) - set(CHECKS)
    if unknown:
        raise ValueError(f"unknown layers: {sorted(unknown)}")
    seeds = list(seeds)
    return [SuiteResult(name, s, CHECKS[name](s)) for name in names for s in seeds]
