"""Linear layers, MLPs and softmax cross-attention on the autodiff core."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, softmax


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths [in, h1, ..., out] with one hidden activation."""

    widths: tuple
    activation: str = "relu"  # applied after every layer except the last

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("MlpSpec needs at least an input and an output width")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be >= 1, got {self.widths}")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self):
        return len(self.widths) - 1

    def param_count(self):
        return sum((i + 1) * o for i, o in zip(self.widths[:-1], self.widths[1:]))


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def init_mlp(spec: MlpSpec, rng: np.random.Generator, dtype=np.float32,
             zero_last=False, name=""):
    """Xavier-uniform weights, zero bias.  `zero_last` zeroes the final layer
    so the network starts as the zero map (used by residual predictors)."""
    params = []
    for i, (fi, fo) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        last = i == spec.n_layers - 1
        w = np.zeros((fi, fo), dtype) if (zero_last and last) else xavier_uniform(rng, fi, fo, dtype)
        params.append(Tensor(w, requires_grad=True, name=f"{name}.w{i}"))
        params.append(Tensor(np.zeros(fo, dtype), requires_grad=True, name=f"{name}.b{i}"))
    return params


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight fan-in {w.shape[0]}")
    return x @ w + b


def mlp_apply(spec: MlpSpec, params, x: Tensor) -> Tensor:
    if len(params) != 2 * spec.n_layers:
        raise ShapeError(f"mlp_apply: expected {2 * spec.n_layers} params, got {len(params)}")
    if x.shape[-1] != spec.widths[0]:
        raise ShapeError(
            f"mlp_apply: input width {x.shape[-1]} does not match spec input {spec.widths[0]}"
        )
    h = x
    for i in range(spec.n_layers):
        h = linear(h, params[2 * i], params[2 * i + 1])
        if i < spec.n_layers - 1 and spec.activation == "relu":
            h = h.relu()
    return h


def cross_attention(queries: Tensor, keys: Tensor, values: Tensor):
    """Scaled dot-product attention.  Returns (output N x d, weights N x M)."""
    if keys.shape[0] == 0:
        raise ShapeError("empty key set")
    d = queries.shape[-1]
    if keys.shape[-1] != d or values.shape[-1] != d:
        raise ShapeError(
            f"cross_attention: widths differ (q={d}, k={keys.shape[-1]}, v={values.shape[-1]})"
        )
    if keys.shape[0] != values.shape[0]:
        raise ShapeError("cross_attention: key/value counts differ")
    logits = (queries @ keys.T) * (1.0 / math.sqrt(d))
    weights = softmax(logits, axis=-1)
    return weights @ values, weights


@dataclass
class AttentionLayer:
    """Single-head cross-attention with learned Q/K/V/output projections."""

    d_model: int
    d_kv_in: int
    params: list = field(default_factory=list)

    @staticmethod
    def create(d_model, d_kv_in, rng, dtype=np.float32, zero_out=False, name=""):
        layer = AttentionLayer(d_model, d_kv_in)
        dims = [(d_model, d_model), (d_kv_in, d_model), (d_kv_in, d_model), (d_model, d_model)]
        for tag, (fi, fo) in zip("qkvo", dims):
            last = tag == "o"
            w = np.zeros((fi, fo), dtype) if (zero_out and last) else xavier_uniform(rng, fi, fo, dtype)
            layer.params.append(Tensor(w, requires_grad=True, name=f"{name}.{tag}w"))
            layer.params.append(Tensor(np.zeros(fo, dtype), requires_grad=True, name=f"{name}.{tag}b"))
        return layer

    def __call__(self, x: Tensor, tokens: Tensor):
        wq, bq, wk, bk, wv, bv, wo, bo = self.params
        q = linear(x, wq, bq)
        k = linear(tokens, wk, bk)
        v = linear(tokens, wv, bv)
        att, weights = cross_attention(q, k, v)
        return linear(att, wo, bo), weights
