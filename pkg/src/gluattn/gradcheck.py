"""Central-difference gradient checking and the built-in verification suite."""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, causal_mask, glu_mha_forward, mha_forward
from .errors import GradientError, NumericError
from .model import ModelConfig, block_forward, init_model
from .nn import GLUFFN, Embedding, LayerNorm, Linear, glu, glu_packed, linear_forward
from .rng import make_rng
from .tensor import Tape, Tensor, backward
from .train import cross_entropy

TOLERANCE = 1e-4
SCOPES = ("ops", "attention", "model")


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def grad_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], h: float = 1e-5) -> float:
    """Max relative error between tape gradients of ``f`` and central differences.

    ``x`` is one f64 tensor or a sequence of them; ``f(*x)`` must return a
    scalar. Every coordinate of every input is perturbed by ``+-h``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if t.dtype != np.float64:
            raise GradientError(f"grad_check needs f64 inputs, got {t.dtype_name}")
    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            out = f(*xs)
        analytic = backward(out, tape) if out.requires_grad else {}
        worst = 0.0
        for i, t in enumerate(xs):
            a = analytic.get(t, np.zeros_like(t.data)).reshape(-1)
            flat = t.data.reshape(-1)
            numeric = np.empty_like(a)
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + h
                plus = f(*xs).item()
                flat[j] = orig - h
                minus = f(*xs).item()
                flat[j] = orig
                if not (math.isfinite(plus) and math.isfinite(minus)):
                    raise NumericError(f"non-finite value perturbing input {i} coordinate {j}")
                numeric[j] = (plus - minus) / (2.0 * h)
            if not np.all(np.isfinite(a)):
                raise NumericError(f"non-finite analytic gradient for input {i}")
            if a.size:
                worst = max(worst, float(_relative_error(a, numeric).max()))
        return worst
    finally:
        for t, (rg, g) in zip(xs, saved):
            t.requires_grad, t.grad = rg, g


# --------------------------------------------------------------------------
# suite
# --------------------------------------------------------------------------

def _rand(rng, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), dtype="f64")


class _Probe:
    """Scalarize an output as <out, w> with w drawn once and then frozen."""

    def __init__(self, rng):
        self.rng = rng
        self.w = None

    def __call__(self, out: Tensor) -> Tensor:
        if self.w is None:
            self.w = Tensor(self.rng.normal(size=out.shape), dtype="f64")
        return T.sum_(T.mul(out, self.w))


def _op_cases(rng):
    ids = np.array([[0, 2, 1], [3, 3, 0]])
    targets = rng.integers(0, 5, size=4)
    mask = np.zeros((3, 4))
    mask[0, 2:] = -T.MASK_SENTINEL
    # keep relu inputs away from the kink
    away = rng.uniform(0.2, 1.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
    yield "matmul", T.matmul, [_rand(rng, 3, 4), _rand(rng, 4, 2)]
    yield "matmul_batched", T.matmul, [_rand(rng, 2, 3, 4), _rand(rng, 4, 2)]
    yield "add", T.add, [_rand(rng, 2, 3), _rand(rng, 3)]
    yield "sub", T.sub, [_rand(rng, 2, 3), _rand(rng, 2, 3)]
    yield "mul", T.mul, [_rand(rng, 2, 3), _rand(rng, 1, 3)]
    yield "scale", lambda a: T.scale(a, -2.5), [_rand(rng, 2, 3)]
    yield "transpose", T.transpose, [_rand(rng, 2, 3, 4)]
    yield "reshape", lambda a: T.reshape(a, (4, 3)), [_rand(rng, 2, 6)]
    yield "concat_last", lambda a, b: T.concat_last([a, b]), [_rand(rng, 2, 3), _rand(rng, 2, 2)]
    yield "split_half_last", lambda a: T.mul(*T.split_half_last(a)), [_rand(rng, 3, 4)]
    yield "sum", lambda a: T.sum_(a, axis=1), [_rand(rng, 3, 4)]
    yield "mean", lambda a: T.mean(a, axis=0), [_rand(rng, 3, 4)]
    yield "gather_rows", lambda a: T.gather_rows(a, ids), [_rand(rng, 4, 3)]
    yield "relu", T.relu, [Tensor(away, dtype="f64")]
    yield "sigmoid", T.sigmoid, [_rand(rng, 3, 4, lo=-3, hi=3)]
    yield "silu", T.silu, [_rand(rng, 3, 4, lo=-3, hi=3)]
    yield "softmax_last", lambda a: T.softmax_last(a, mask), [_rand(rng, 3, 4, lo=-2, hi=2)]
    yield "cross_entropy", lambda a: cross_entropy(a, targets), [_rand(rng, 4, 5, lo=-2, hi=2)]


def _layer_cases(rng):
    lin = Linear(5, 3, rng, "f64")
    yield "linear", lambda x, w: linear_forward(lin, x), [_rand(rng, 4, 5), lin.weight]
    emb = Embedding(6, 4, rng, "f64")
    yield "embedding", lambda t: emb([[1, 5], [1, 0]]), [emb.table]
    ln = LayerNorm(5, "f64")
    ln.gain.data = rng.uniform(0.5, 1.5, size=5)
    ln.shift.data = rng.uniform(-0.5, 0.5, size=5)
    yield "layer_norm", lambda x, gain, shift: ln(x), [_rand(rng, 3, 5), ln.gain, ln.shift]
    yield "glu", glu, [_rand(rng, 3, 4), _rand(rng, 3, 4, lo=-3, hi=3)]
    yield "glu_packed", glu_packed, [_rand(rng, 3, 8, lo=-3, hi=3)]
    ffn = GLUFFN(6, 4, rng, rng, "f64")
    yield "glu_ffn", lambda x, a, b: ffn(x), [_rand(rng, 3, 6), ffn.w_in.weight, ffn.w_out.weight]


def _attention_cases(rng):
    for variant, fwd in (("baseline", mha_forward), ("glu", glu_mha_forward)):
        cfg = AttentionConfig(6, 2, variant)
        ws = [_rand(rng, *shape, lo=-0.6, hi=0.6) for shape in cfg.weight_shapes().values()]
        for masked in (False, True):
            mask = causal_mask(4, "f64") if masked else None

            def f(q, k, v, wq, wk, wv, wo, cfg=cfg, fwd=fwd, mask=mask):
                return fwd(cfg, wq, wk, wv, wo, q, k, v, mask=mask)

            name = ("glu_" if variant == "glu" else "") + "mha" + ("_causal" if masked else "")
            m = 4 if masked else 5
            yield name, f, [_rand(rng, 4, 6), _rand(rng, m, 6), _rand(rng, m, 6), *ws]


def _model_cases(rng):
    for variant in ("baseline", "glu"):
        tag = "" if variant == "baseline" else "_glu"
        block_cfg = ModelConfig(1, 6, 1, 4, variant, "classify", n_patches=3, patch_dim=6)
        block = init_model(block_cfg, seed=1, dtype="f64").blocks[0]
        yield (f"block{tag}", lambda x, *ps, b=block: block_forward(b, x),
               [_rand(rng, 3, 6), *(p for _, p in block.named_parameters())])

        cls_cfg = ModelConfig(2, 12, 2, 8, variant, "classify", n_classes=3, n_patches=4, patch_dim=12)
        cls = init_model(cls_cfg, seed=2, dtype="f64")
        patches = Tensor(rng.uniform(0, 1, size=(2, 4, 12)), dtype="f64")
        y_cls = rng.integers(0, 3, size=2)
        yield (f"classifier{tag}", lambda *ps, m=cls, x=patches, y=y_cls: cross_entropy(m(x), y),
               cls.parameters())

        lm_cfg = ModelConfig(2, 6, 2, 4, variant, "lm", vocab=7, context=3)
        lm = init_model(lm_cfg, seed=3, dtype="f64")
        ids = rng.integers(0, 7, size=(2, 3))
        y_lm = rng.integers(0, 7, size=(2, 3))
        yield f"lm{tag}", lambda *ps, m=lm, x=ids, y=y_lm: cross_entropy(m(x), y), lm.parameters()


def run_suite(scope: str = "model", seed: int = 0, h: float = 1e-5) -> list[tuple[str, float]]:
    """Run the f64 finite-difference checks up to ``scope``.

    ``ops`` covers tensor ops and layers; ``attention`` adds both attention
    variants; ``model`` adds blocks and both full desk models.
    """
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")
    rng = make_rng(seed, "gradcheck")
    groups = [_op_cases, _layer_cases]
    if scope in ("attention", "model"):
        groups.append(_attention_cases)
    if scope == "model":
        groups.append(_model_cases)
    results = []
    for group in groups:
        for name, fn, inputs in group(rng):
            probe = _Probe(rng)
            results.append((name, grad_check(lambda *xs, fn=fn, p=probe: p(fn(*xs)), inputs, h)))
    return results
