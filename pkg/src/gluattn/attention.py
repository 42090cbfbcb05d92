"""Baseline multi-head attention and the GLU-valued variant at matched parameter count.

The GLU variant projects values to ``4d/3`` features, applies a packed GLU
(halving them to ``2d/3``), runs ordinary scaled dot-product attention with
those narrower values, and maps ``2d/3 -> d`` on the way out. Query/key paths
are the same as the baseline. Weight count of W_V + W_O is then

    d * 4d/3 + 2d/3 * d = 2 d^2

which is exactly what the baseline's two ``d x d`` matrices cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import Linear, glu_packed
from .tensor import (MASK_SENTINEL, Tensor, as_dtype, matmul, reshape, scale, softmax_last,
                     transpose)

VARIANTS = ("baseline", "glu")


def matched_dims(d_model: int, n_heads: int) -> tuple[int, int]:
    """Value-projection width and attention width for the GLU variant.

    Returns ``(4d/3, 2d/3)``, the unique widths for which the GLU variant's
    W_V/W_O weight count equals the baseline's.
    """
    if d_model <= 0 or n_heads <= 0:
        raise ConfigError(f"d_model and n_heads must be positive, got {d_model}, {n_heads}")
    if d_model % 3:
        raise ConfigError(
            f"d_model={d_model} is not divisible by 3: GLU attention needs a value projection of "
            f"4*d/3 features (halved to 2*d/3 by the GLU) so that d*(4d/3) + (2d/3)*d = 2*d^2 "
            f"matches the baseline W_V + W_O")
    inner = 2 * d_model // 3
    if inner % n_heads:
        raise ConfigError(
            f"GLU attention width 2*d/3 = {inner} is not divisible by n_heads={n_heads}")
    return 4 * d_model // 3, inner


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int
    variant: str = "baseline"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown attention variant {self.variant!r}; expected one of {VARIANTS}")
        if self.d_model <= 0 or self.n_heads <= 0:
            raise ConfigError(f"d_model and n_heads must be positive, got {self.d_model}, {self.n_heads}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.variant == "glu":
            matched_dims(self.d_model, self.n_heads)

    @property
    def head_dim(self) -> int:
        """Query/key width per head; identical for both variants."""
        return self.d_model // self.n_heads

    @property
    def v_proj_out(self) -> int:
        return self.d_model if self.variant == "baseline" else matched_dims(self.d_model, self.n_heads)[0]

    @property
    def attn_inner(self) -> int:
        return self.d_model if self.variant == "baseline" else self.v_proj_out // 2

    @property
    def per_head_v(self) -> int:
        return self.attn_inner // self.n_heads

    def weight_shapes(self) -> dict[str, tuple[int, int]]:
        d = self.d_model
        return {"w_q": (d, d), "w_k": (d, d), "w_v": (d, self.v_proj_out), "w_o": (self.attn_inner, d)}


def param_count(cfg: AttentionConfig) -> int:
    return sum(a * b for a, b in cfg.weight_shapes().values())


def causal_mask(n: int, dtype="f64") -> Tensor:
    """[n, n] additive mask: 0 where key j <= query i, -sentinel above the diagonal."""
    if n < 1:
        raise ShapeError(f"causal mask needs n >= 1, got {n}")
    m = np.triu(np.full((n, n), -MASK_SENTINEL), k=1)
    return Tensor(m, dtype=as_dtype(dtype))


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    # (..., n, H*w) -> (..., H, n, w)
    *lead, n, width = x.shape
    x = reshape(x, (*lead, n, n_heads, width // n_heads))
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    # (..., H, n, w) -> (..., n, H*w)
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    x = transpose(x, axes)
    *lead, n, h, w = x.shape
    return reshape(x, (*lead, n, h * w))


def _check(cfg: AttentionConfig, w_q, w_k, w_v, w_o, q, k, v):
    shapes = cfg.weight_shapes()
    for name, w in zip(("w_q", "w_k", "w_v", "w_o"), (w_q, w_k, w_v, w_o)):
        if w.shape != shapes[name]:
            raise ShapeError(f"{name} has shape {w.shape}, expected {shapes[name]} for {cfg}")
    for name, t in zip("QKV", (q, k, v)):
        if t.ndim < 2 or t.shape[-1] != cfg.d_model:
            raise ShapeError(f"{name} must be [..., n, {cfg.d_model}], got {t.shape}")
    if k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(f"K and V disagree on sequence shape: {k.shape} vs {v.shape}")


def _attend(cfg, q_proj, k_proj, v_proj, w_o, mask, return_weights):
    qh = _split_heads(q_proj, cfg.n_heads)
    kh = _split_heads(k_proj, cfg.n_heads)
    vh = _split_heads(v_proj, cfg.n_heads)
    scores = scale(matmul(qh, transpose(kh)), 1.0 / math.sqrt(cfg.head_dim))
    weights = softmax_last(scores, mask)
    out = matmul(_merge_heads(matmul(weights, vh)), w_o)
    return (out, weights) if return_weights else out


def mha_forward(cfg: AttentionConfig, w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor,
                q: Tensor, k: Tensor, v: Tensor, mask=None, return_weights: bool = False):
    """Standard multi-head attention.

    Shapes are ``q: [..., n, d]``, ``k, v: [..., m, d]``; ``mask`` broadcasts to
    ``[..., heads, n, m]``. With ``return_weights`` the per-head attention
    probabilities are returned alongside the output.
    """
    if cfg.variant != "baseline":
        raise ConfigError("mha_forward expects a baseline config; use glu_mha_forward")
    _check(cfg, w_q, w_k, w_v, w_o, q, k, v)
    return _attend(cfg, matmul(q, w_q), matmul(k, w_k), matmul(v, w_v), w_o, mask, return_weights)


def glu_mha_forward(cfg: AttentionConfig, w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor,
                    q: Tensor, k: Tensor, v: Tensor, mask=None, return_weights: bool = False):
    """Multi-head attention whose projected values pass through a packed GLU.

    The GLU acts on the full ``4d/3`` projection before it is split into heads.
    """
    if cfg.variant != "glu":
        raise ConfigError("glu_mha_forward expects a glu config; use mha_forward")
    _check(cfg, w_q, w_k, w_v, w_o, q, k, v)
    v_proj = glu_packed(matmul(v, w_v))
    return _attend(cfg, matmul(q, w_q), matmul(k, w_k), v_proj, w_o, mask, return_weights)


def attention_forward(cfg: AttentionConfig, *args, **kwargs):
    fn = glu_mha_forward if cfg.variant == "glu" else mha_forward
    return fn(cfg, *args, **kwargs)


class MultiHeadAttention:
    """Self-attention layer holding W_Q, W_K, W_V, W_O for either variant."""

    def __init__(self, cfg: AttentionConfig, rngs: dict[str, np.random.Generator], dtype="f32"):
        self.cfg = cfg
        shapes = cfg.weight_shapes()
        self.w_q, self.w_k, self.w_v, self.w_o = (
            Linear(*shapes[n], rngs[n], dtype, name=n) for n in ("w_q", "w_k", "w_v", "w_o"))

    def __call__(self, x: Tensor, mask=None, return_weights: bool = False):
        return attention_forward(self.cfg, self.w_q.weight, self.w_k.weight, self.w_v.weight,
                                 self.w_o.weight, x, x, x, mask=mask, return_weights=return_weights)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for n in ("w_q", "w_k", "w_v", "w_o"):
            yield prefix + n, getattr(self, n).weight
