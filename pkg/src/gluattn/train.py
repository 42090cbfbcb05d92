"""Cross-entropy, AdamW, cosine annealing and the deterministic training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .data import Dataset, batch_indices
from .errors import ConfigError, DivergenceError, NumericError, ShapeError
from .tensor import Tensor, Tape, apply_op, backward, zero_grads


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 1e-4
    lr_min: float = 0.0
    total_steps: Optional[int] = None  # None: epochs * steps_per_epoch, filled in by fit()
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 384
    epochs: int = 20
    seed: int = 0
    grad_clip: Optional[float] = None

    def __post_init__(self):
        if self.lr_min > self.lr_max:
            raise ConfigError(f"lr_min={self.lr_min} exceeds lr_max={self.lr_max}")
        if self.total_steps is not None and self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError(f"invalid batch_size={self.batch_size} / epochs={self.epochs}")


@dataclass
class Record:
    epoch: int
    step: int
    phase: str  # train | val | summary
    loss: float
    accuracy: float
    lr: float


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``logits`` is ``[..., C]`` and ``targets`` integer ids of the leading shape.
    """
    targets = np.asarray(targets)
    n_cls = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= n_cls):
        raise ShapeError(f"target id out of range for {n_cls} classes")
    z = logits.data.reshape(-1, n_cls)
    t = targets.reshape(-1)
    n = z.shape[0]
    # non-finite logits surface as a non-finite loss, which callers report
    with np.errstate(invalid="ignore", over="ignore"):
        zmax = z.max(axis=-1, keepdims=True)
        shifted = z - zmax
        lse = np.log(np.exp(shifted).sum(axis=-1))
        nll = lse - shifted[np.arange(n), t]
    loss = np.asarray(nll.mean(), dtype=logits.dtype)

    def grad_fn(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), t] -= 1.0
        return ((p * (g / n)).astype(logits.dtype).reshape(logits.shape),)

    return apply_op("cross_entropy", loss, (logits,), grad_fn)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

def cosine_lr(cfg: TrainConfig, t: int) -> float:
    total = cfg.total_steps
    if total is None:
        raise ConfigError("cosine_lr needs total_steps")
    if not 0 <= t <= total:
        raise ConfigError(f"step {t} outside schedule range 0..{total}")
    if t == 0:
        return cfg.lr_max
    if t == total:
        return cfg.lr_min
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * t / total))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def decays(name: str) -> bool:
    """Decoupled weight decay applies to linear weights only."""
    return not (name.endswith((".gain", ".shift")) or "embed" in name)


def adamw_step(state: OptimizerState, params: dict[str, Tensor], grads: dict[str, np.ndarray],
               lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01,
               decay_filter: Callable[[str], bool] = decays) -> None:
    """One in-place AdamW update of ``params``.

    Decay is decoupled and uses the pre-update value:
    ``theta -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * theta``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = lr * ((m / c1) / (np.sqrt(v / c2) + eps))
        if weight_decay and decay_filter(name):
            update = update + lr * weight_decay * p.data
        p.data = (p.data - update).astype(p.dtype, copy=False)


class AdamW:
    def __init__(self, named_params, cfg: TrainConfig, decay_filter: Callable[[str], bool] = decays):
        self.params = dict(named_params)
        self.cfg = cfg
        self.decay_filter = decay_filter
        self.state = OptimizerState()

    def step(self, lr: float) -> None:
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        if self.cfg.grad_clip is not None:
            norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
            if norm > self.cfg.grad_clip:
                grads = {n: g * (self.cfg.grad_clip / norm) for n, g in grads.items()}
        adamw_step(self.state, self.params, grads, lr, self.cfg.betas, self.cfg.eps,
                   self.cfg.weight_decay, self.decay_filter)

    def zero_grad(self) -> None:
        zero_grads(self.params.values())


# --------------------------------------------------------------------------
# loop
# --------------------------------------------------------------------------

def _accuracy(logits: np.ndarray, targets: np.ndarray) -> float:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class id
    pred = logits.reshape(-1, logits.shape[-1]).argmax(axis=-1)
    return float(np.mean(pred == targets.reshape(-1)))


def _inputs(model, batch: Dataset):
    if batch.task == "classify":
        return Tensor(batch.inputs, dtype=model.dtype)
    return batch.inputs


def evaluate(model, dataset: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Mean per-prediction loss and argmax accuracy over ``dataset`` in its stored order."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    total_loss = 0.0
    correct = 0.0
    count = 0
    for lo in range(0, len(dataset), batch_size):
        batch = dataset.subset(slice(lo, lo + batch_size))
        logits = model(_inputs(model, batch))
        n = batch.targets.size
        total_loss += cross_entropy(logits, batch.targets).item() * n
        correct += _accuracy(logits.data, batch.targets) * n
        count += n
    return total_loss / count, correct / count


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def fit(model, train: Dataset, cfg: TrainConfig, val: Optional[Dataset] = None,
        on_record: Optional[Callable[[Record], None]] = None) -> list[Record]:
    """Train ``model`` in place; returns one record per optimizer step plus per-epoch val records.

    Data order comes from ``(cfg.seed, epoch)``; the learning rate follows a
    per-step cosine schedule over ``epochs * steps_per_epoch`` steps.
    """
    history: list[Record] = []
    if cfg.epochs == 0:
        return history
    if len(train) == 0:
        raise ConfigError("training set is empty")
    per_epoch = steps_per_epoch(len(train), cfg.batch_size)
    if cfg.total_steps is None:
        cfg = replace(cfg, total_steps=cfg.epochs * per_epoch)
    opt = AdamW(model.named_parameters(), cfg)

    def emit(rec):
        history.append(rec)
        if on_record is not None:
            on_record(rec)

    step = 0
    lr = cfg.lr_max
    for epoch in range(cfg.epochs):
        for idx in batch_indices(len(train), cfg.batch_size, cfg.seed, epoch):
            batch = train.subset(idx)
            lr = cosine_lr(cfg, min(step, cfg.total_steps))
            opt.zero_grad()
            with Tape() as tape:
                logits = model(_inputs(model, batch))
                loss = cross_entropy(logits, batch.targets)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(step + 1, value)
            backward(loss, tape)
            opt.step(lr)
            step += 1
            emit(Record(epoch + 1, step, "train", value, _accuracy(logits.data, batch.targets), lr))
        if val is not None and len(val):
            val_loss, val_acc = evaluate(model, val)
            emit(Record(epoch + 1, step, "val", val_loss, val_acc, lr))
    return history
