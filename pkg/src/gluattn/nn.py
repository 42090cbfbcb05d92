"""Parameterized layers: bias-free linear maps, embeddings, layer norm, GLU and the GLU FFN."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .errors import ShapeError
from .tensor import (Tensor, apply_op, as_dtype, gather_rows, matmul, mul, reshape, silu,
                     split_half_last)


def _param(data: np.ndarray, name: str) -> Tensor:
    return Tensor(data, dtype=data.dtype, requires_grad=True, name=name)


class Linear:
    """``y = x @ W`` with ``W`` stored as [in, out]; no bias."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 dtype="f32", name: str = "weight"):
        bound = 1.0 / np.sqrt(in_features)
        w = rng.uniform(-bound, bound, size=(in_features, out_features))
        self.weight = _param(w.astype(as_dtype(dtype)), name)

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield prefix + "weight", self.weight


def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] != layer.in_features:
        raise ShapeError(
            f"linear {layer.in_features}->{layer.out_features} got input of shape {x.shape}")
    if x.ndim == 1:
        return reshape(matmul(reshape(x, (1, x.shape[0])), layer.weight), (layer.out_features,))
    return matmul(x, layer.weight)


class Embedding:
    def __init__(self, num_rows: int, dim: int, rng: np.random.Generator,
                 dtype="f32", name: str = "table"):
        table = rng.normal(0.0, 0.02, size=(num_rows, dim))
        self.table = _param(table.astype(as_dtype(dtype)), name)

    @property
    def num_rows(self) -> int:
        return self.table.shape[0]

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.num_rows):
            bad = ids.max() if ids.max() >= self.num_rows else ids.min()
            raise ShapeError(f"index {int(bad)} out of range for embedding with {self.num_rows} rows")
        return gather_rows(self.table, ids)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield prefix + "table", self.table


class LayerNorm:
    def __init__(self, dim: int, dtype="f32", eps: float = 1e-5):
        dt = as_dtype(dtype)
        self.gain = _param(np.ones(dim, dtype=dt), "gain")
        self.shift = _param(np.zeros(dim, dtype=dt), "shift")
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm_forward(self, x)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield prefix + "gain", self.gain
        yield prefix + "shift", self.shift


def layer_norm_forward(p: LayerNorm, x: Tensor) -> Tensor:
    """Normalize each last-axis slice to zero mean / unit variance, then apply gain and shift."""
    d = p.gain.shape[0]
    if x.ndim == 0 or x.shape[-1] != d:
        raise ShapeError(f"layer norm over {d} features got input of shape {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(p.eps))
    xhat = xc * inv
    out = xhat * p.gain.data + p.shift.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        g_gain = np.sum(g * xhat, axis=lead)
        g_shift = np.sum(g, axis=lead)
        gx_hat = g * p.gain.data
        gx = inv * (gx_hat
                    - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, g_gain, g_shift

    return apply_op("layer_norm", out, (x, p.gain, p.shift), grad_fn)


def glu(x: Tensor, g: Tensor) -> Tensor:
    """Gated linear unit ``x * silu(g)``."""
    if x.shape != g.shape:
        raise ShapeError(f"glu: value shape {x.shape} differs from gate shape {g.shape}")
    return mul(x, silu(g))


def glu_packed(x: Tensor) -> Tensor:
    """GLU on a packed tensor: first half of the last axis is the value, second half the gate."""
    value, gate = split_half_last(x)
    return glu(value, gate)


class GLUFFN:
    """Feed-forward sublayer ``d -> 2h -> glu -> h -> d``."""

    def __init__(self, d_model: int, hidden: int, rng_in: np.random.Generator,
                 rng_out: np.random.Generator, dtype="f32"):
        self.w_in = Linear(d_model, 2 * hidden, rng_in, dtype, name="w_in")
        self.w_out = Linear(hidden, d_model, rng_out, dtype, name="w_out")

    def __call__(self, x: Tensor) -> Tensor:
        return glu_ffn_forward(self, x)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.w_in.named_parameters(prefix + "w_in.")
        yield from self.w_out.named_parameters(prefix + "w_out.")


def glu_ffn_forward(ffn: GLUFFN, x: Tensor) -> Tensor:
    return ffn.w_out(glu_packed(ffn.w_in(x)))
