"""Layers, parameter initialization and optimizers.

Layers keep their weights as attributes; :meth:`Module.named_parameters`
walks attributes in definition order, so parameter names are dotted paths
such as ``stay.fusion.W_Q``.
"""

from __future__ import annotations

import math
import zlib
from typing import Iterator

import numpy as np

from hmp import tensor as T
from hmp.errors import MissingGradient, ShapeMismatch
from hmp.tensor import Tensor


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict, names=None) -> list[str]:
        """Copy values for ``names`` (default: every key in ``state``) into matching parameters.

        Returns the names that were loaded. Unknown names are ignored; a
        shape disagreement raises :class:`ShapeMismatch` naming the parameter.
        """
        own = self.parameters()
        keys = list(state) if names is None else list(names)
        loaded = []
        for name in keys:
            if name not in own:
                continue
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != own[name].shape:
                raise ShapeMismatch(
                    f"parameter {name}: checkpoint shape {list(value.shape)} "
                    f"vs model shape {list(own[name].shape)}"
                )
            own[name].data[...] = value
            loaded.append(name)
        return loaded

    def reset_parameters(self, seed: int):
        init_params(self, seed)
        return self


def _param(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _name_rng(seed: int, name: str) -> np.random.Generator:
    # One independent stream per parameter name, so adding a layer never
    # shifts the values drawn for another.
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


def init_params(module: Module, seed: int) -> dict[str, Tensor]:
    """Glorot-uniform matrices, zero biases, unit LayerNorm gains, forget-gate bias 1."""
    params = module.parameters()
    for name, p in params.items():
        leaf = name.rsplit(".", 1)[-1]
        if p.ndim == 2:
            fan_out, fan_in = p.shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            p.data[...] = _name_rng(seed, name).uniform(-bound, bound, size=p.shape)
        elif leaf in ("gamma", "b_f"):
            p.data[...] = 1.0
        else:
            p.data[...] = 0.0
        p.zero_grad()
    return params


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, seed: int | None = None):
        self.W = _param(out_dim, in_dim)
        self.b = _param(out_dim)
        if seed is not None:
            self.reset_parameters(seed)

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeMismatch(f"linear expects last extent {self.in_dim}, got {x.shape[-1]}")
        if x.ndim == 1:
            row = T.reshape(x, (1, self.in_dim))
            return T.reshape(T.add(T.matmul(row, T.transpose(self.W)), self.b), (self.W.shape[0],))
        return T.add(T.matmul(x, T.transpose(self.W)), self.b)


def mlp_forward(layer: Linear, x: Tensor) -> Tensor:
    return T.relu(layer(x))


class LSTM(Module):
    """Single-layer LSTM with separate per-gate weights.

    ``input_dim=None`` builds a cell without input weights, driven only by
    its recurrent state (used by the decoder, whose inputs are all zero).
    """

    GATES = ("i", "f", "o", "c")

    def __init__(self, input_dim: int | None, hidden: int, seed: int | None = None):
        self.hidden = hidden
        self.input_dim = input_dim
        for g in self.GATES:
            if input_dim is not None:
                setattr(self, f"W_{g}", _param(hidden, input_dim))
            setattr(self, f"U_{g}", _param(hidden, hidden))
            setattr(self, f"b_{g}", _param(hidden))
        if seed is not None:
            self.reset_parameters(seed)

    def _stacked(self, prefix: str) -> Tensor:
        return T.concat([getattr(self, f"{prefix}_{g}") for g in self.GATES], axis=0)

    def step(self, pre: Tensor, h: Tensor, c: Tensor, U_t: Tensor) -> tuple[Tensor, Tensor]:
        """One recurrence given the input pre-activation ``pre`` (bias included)."""
        hd = self.hidden
        gates = T.add(pre, T.matmul(h, U_t))
        sig = T.sigmoid(gates[..., : 3 * hd])
        cand = T.tanh(gates[..., 3 * hd :])
        i, f, o = sig[..., :hd], sig[..., hd : 2 * hd], sig[..., 2 * hd :]
        c = T.add(T.mul(f, c), T.mul(i, cand))
        h = T.mul(o, T.tanh(c))
        return h, c

    def forward(self, seq: Tensor, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """Run over ``seq`` of shape [..., steps, input]; returns final (h, c).

        ``mask`` of shape [..., steps] freezes the state on padded steps.
        """
        if self.input_dim is None:
            raise ShapeMismatch("cell has no input weights; use LSTMDecoder")
        if seq.ndim < 2 or seq.shape[-1] != self.input_dim:
            raise ShapeMismatch(f"lstm expects [..., steps, {self.input_dim}], got {list(seq.shape)}")
        steps = seq.shape[-2]
        if steps < 1:
            raise ShapeMismatch("lstm needs at least one step")
        lead = seq.shape[:-2]
        pre_all = T.add(T.matmul(seq, T.transpose(self._stacked("W"))), self._stacked("b"))
        U_t = T.transpose(self._stacked("U"))
        h = Tensor(np.zeros(lead + (1, self.hidden)))
        c = Tensor(np.zeros(lead + (1, self.hidden)))
        for t in range(steps):
            pre = pre_all[..., t : t + 1, :]
            h_new, c_new = self.step(pre, h, c, U_t)
            if mask is None:
                h, c = h_new, c_new
            else:
                m = Tensor(np.asarray(mask, dtype=np.float64)[..., t : t + 1, None])
                keep = Tensor(1.0 - m.data)
                h = T.add(T.mul(m, h_new), T.mul(keep, h))
                c = T.add(T.mul(m, c_new), T.mul(keep, c))
        return T.reshape(h, lead + (self.hidden,)), T.reshape(c, lead + (self.hidden,))


def lstm_encode(params: LSTM, seq: Tensor) -> Tensor:
    return params.forward(seq)[0]


class LSTMDecoder(Module):
    """Unrolls from an initial hidden state with zero inputs at every step."""

    def __init__(self, hidden: int, out_dim: int, seed: int | None = None):
        self.cell = LSTM(None, hidden)
        self.init_cell = Linear(hidden, hidden)
        self.out = Linear(hidden, out_dim)
        if seed is not None:
            self.reset_parameters(seed)

    def __call__(self, b: Tensor, steps: int) -> Tensor:
        if steps < 1:
            raise ShapeMismatch("decoder needs at least one step")
        hd = self.cell.hidden
        if b.shape[-1] != hd:
            raise ShapeMismatch(f"decoder expects initial state of extent {hd}, got {b.shape[-1]}")
        lead = b.shape[:-1]
        h = T.reshape(b, lead + (1, hd))
        c = T.tanh(self.init_cell(h))
        bias = self.cell._stacked("b")
        U_t = T.transpose(self.cell._stacked("U"))
        hs = []
        for _ in range(steps):
            h, c = self.cell.step(bias, h, c, U_t)
            hs.append(h)
        return self.out(T.concat(hs, axis=-2))


def lstm_decode(params: LSTMDecoder, b: Tensor, steps: int) -> Tensor:
    return params(b, steps)


class FusionBlock(Module):
    """Single-head self-attention over stacked tokens, residual, LayerNorm, max-pool."""

    eps = 1e-5

    def __init__(self, dim: int, seed: int | None = None):
        self.dim = dim
        self.W_Q = _param(dim, dim)
        self.W_K = _param(dim, dim)
        self.W_V = _param(dim, dim)
        self.gamma = _param(dim)
        self.beta = _param(dim)
        if seed is not None:
            self.reset_parameters(seed)
        else:
            self.gamma.data[...] = 1.0

    def attention(self, tokens: Tensor) -> tuple[Tensor, Tensor]:
        """Return (weights [..., n, n], attended [..., n, dim])."""
        if tokens.ndim < 2 or tokens.shape[-1] != self.dim:
            raise ShapeMismatch(f"fusion expects [..., n, {self.dim}], got {list(tokens.shape)}")
        if tokens.shape[-2] < 1:
            raise ShapeMismatch("fusion needs at least one token")
        q = T.matmul(tokens, T.transpose(self.W_Q))
        k = T.matmul(tokens, T.transpose(self.W_K))
        v = T.matmul(tokens, T.transpose(self.W_V))
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(self.dim))
        weights = T.softmax_last_axis(scores)
        return weights, T.matmul(weights, v)

    def __call__(self, tokens: Tensor) -> Tensor:
        _, attended = self.attention(tokens)
        normed = T.layer_norm(T.add(tokens, attended), self.gamma, self.beta, self.eps)
        return T.max_pool_axis(normed, axis=-2)


def fusion_forward(block: FusionBlock, tokens: Tensor) -> Tensor:
    return block(tokens)


# --- optimizers -----------------------------------------------------------


def _as_param_list(params) -> list[Tensor]:
    if isinstance(params, Module):
        return list(params.parameters().values())
    if isinstance(params, dict):
        return list(params.values())
    return list(params)


class SGD:
    kind = "sgd"

    def __init__(self, params, lr: float, weight_decay: float = 0.0):
        self.params = _as_param_list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.steps = 0

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise MissingGradient("parameter has no gradient buffer")
        for p in self.params:
            p.data -= self.lr * (p.grad + self.weight_decay * p.data)
            p.zero_grad()
        self.steps += 1


class AdamW:
    """Adam with bias correction and decoupled weight decay."""

    kind = "adamw"

    def __init__(self, params, lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = _as_param_list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.steps = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p in self.params:
            if p.grad is None:
                raise MissingGradient("parameter has no gradient buffer")
        self.steps += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.steps
        c2 = 1.0 - b2**self.steps
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            p.data -= self.lr * self.weight_decay * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.zero_grad()


def make_optimizer(kind: str, params, lr: float, weight_decay: float = 0.0):
    if kind == "adamw":
        return AdamW(params, lr=lr, weight_decay=weight_decay)
    if kind == "sgd":
        return SGD(params, lr=lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")
