"""Experiment specs (plain ``key=value`` files) and the train-and-record runner.

Spec grammar: one ``key = value`` per line, blank lines ignored, ``#`` starts
a comment. Booleans are ``true``/``false``, missing optionals are ``none``.
Unknown keys are rejected. Example::

    task = classify
    variant = both
    d_model = 48
    n_heads = 4
    epochs = 75
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .checkpoint import atomic_write, checkpoint_save
from .data import (Dataset, byte_entropy, image_dataset, lm_windows, read_cifar_binary, read_text,
                   synth_images, synth_text)
from .errors import ConfigError
from .model import ModelConfig, init_model
from .train import Record, TrainConfig, evaluate, fit

OUTPUT_DIR_ENV = "GLUATTN_OUTPUT_DIR"
CSV_HEADER = ("epoch", "step", "phase", "loss", "accuracy", "lr")


@dataclass(frozen=True)
class ExperimentSpec:
    task: str = "classify"
    variant: str = "both"
    # model
    n_layers: int = 2
    d_model: int = 48
    n_heads: int = 4
    ffn_hidden: int = 128
    final_norm: bool = False
    dtype: str = "f32"
    # data
    data_path: Optional[str] = None
    data_seed: int = 0
    n_classes: int = 10
    image_size: int = 8
    patch_size: int = 4
    n_samples: int = 64
    n_val: int = 64
    noise: float = 0.1
    n_chars: int = 8192
    context: int = 16
    val_fraction: float = 0.1
    # optimization
    lr_max: float = 1e-3
    lr_min: float = 0.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    epochs: int = 75
    seed: int = 0
    grad_clip: Optional[float] = None
    output_dir: str = "runs/latest"

    def __post_init__(self):
        if self.task not in ("classify", "lm"):
            raise ConfigError(f"task must be classify or lm, got {self.task!r}")
        if self.variant not in ("baseline", "glu", "both"):
            raise ConfigError(f"variant must be baseline, glu or both, got {self.variant!r}")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        for v in self.variants:
            self.model_config(v)
        self.train_config()

    @property
    def variants(self) -> tuple[str, ...]:
        return ("baseline", "glu") if self.variant == "both" else (self.variant,)

    def model_config(self, variant: str) -> ModelConfig:
        if self.task == "classify":
            if self.image_size % self.patch_size:
                raise ConfigError(f"patch_size {self.patch_size} does not divide image_size {self.image_size}")
            n_patches = (self.image_size // self.patch_size) ** 2
            return ModelConfig(self.n_layers, self.d_model, self.n_heads, self.ffn_hidden, variant,
                               "classify", n_classes=self.n_classes, n_patches=n_patches,
                               patch_dim=self.patch_size ** 2 * 3, final_norm=self.final_norm)
        return ModelConfig(self.n_layers, self.d_model, self.n_heads, self.ffn_hidden, variant, "lm",
                           vocab=256, context=self.context, final_norm=self.final_norm)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr_max=self.lr_max, lr_min=self.lr_min, betas=(self.beta1, self.beta2),
                           eps=self.eps, weight_decay=self.weight_decay, batch_size=self.batch_size,
                           epochs=self.epochs, seed=self.seed, grad_clip=self.grad_clip)


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(raw: str, typ: str, key: str):
    optional = typ.startswith("Optional[")
    base = typ[len("Optional["):-1] if optional else typ
    if optional and raw.lower() == "none":
        return None
    try:
        if base == "int":
            return int(raw)
        if base == "float":
            return float(raw)
        if base == "bool":
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {base}") from None


def format_spec(spec: ExperimentSpec) -> str:
    return "".join(f"{f.name} = {_format_value(getattr(spec, f.name))}\n" for f in fields(spec))


def parse_spec(text: str) -> ExperimentSpec:
    types = {f.name: f.type for f in fields(ExperimentSpec)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(raw, types[key], key)
    return ExperimentSpec(**values)


def load_spec(path: str | Path) -> ExperimentSpec:
    return parse_spec(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------
# running
# --------------------------------------------------------------------------

def build_datasets(spec: ExperimentSpec) -> tuple[Dataset, Optional[Dataset], dict]:
    """Train/val datasets for ``spec`` plus a dict of data facts (e.g. unigram entropy)."""
    info: dict = {}
    if spec.task == "classify":
        if spec.data_path is None:
            px, y = synth_images(spec.n_samples, spec.n_classes, spec.data_seed, spec.image_size, spec.noise)
            vpx, vy = synth_images(spec.n_val, spec.n_classes, spec.data_seed + 1, spec.image_size, spec.noise)
        else:
            px, y = read_cifar_binary(spec.data_path)
            if px.shape[1] != spec.image_size:
                raise ConfigError(f"{spec.data_path} holds {px.shape[1]}px images but image_size={spec.image_size}")
            cut = len(px) - int(round(len(px) * spec.val_fraction))
            px, vpx, y, vy = px[:cut], px[cut:], y[:cut], y[cut:]
        train = image_dataset(px, y, spec.patch_size, spec.dtype)
        val = image_dataset(vpx, vy, spec.patch_size, spec.dtype) if len(vpx) else None
        return train, val, info

    ids = synth_text(spec.n_chars, spec.data_seed) if spec.data_path is None else read_text(spec.data_path)
    cut = len(ids) - int(round(len(ids) * spec.val_fraction))
    train = lm_windows(ids[:cut], spec.context)
    val = lm_windows(ids[cut:], spec.context) if len(ids) - cut > spec.context else None
    info["unigram_entropy"] = byte_entropy(ids[:cut])
    return train, val, info


def history_csv(history: list[Record]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in history:
        writer.writerow([r.epoch, r.step, r.phase, repr(float(r.loss)), repr(float(r.accuracy)),
                         repr(float(r.lr))])
    return buf.getvalue()


@dataclass
class VariantResult:
    variant: str
    history: list[Record]
    n_parameters: int
    final_train_loss: Optional[float] = None
    final_train_accuracy: Optional[float] = None
    final_val_loss: Optional[float] = None
    final_val_accuracy: Optional[float] = None


def _final(history: list[Record], phase: str, attr: str) -> Optional[float]:
    rows = [r for r in history if r.phase == phase]
    return getattr(rows[-1], attr) if rows else None


def run_variant(spec: ExperimentSpec, variant: str, train: Dataset, val: Optional[Dataset],
                out_dir: Path) -> VariantResult:
    model = init_model(spec.model_config(variant), seed=spec.seed, dtype=spec.dtype)
    history = fit(model, train, spec.train_config(), val)
    if history:
        loss, acc = evaluate(model, train)
        last = history[-1]
        history.append(Record(last.epoch, last.step, "summary", loss, acc, last.lr))
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write(out_dir / "metrics.csv", history_csv(history).encode("utf-8"))
    checkpoint_save(model, out_dir / "checkpoint.glua")
    return VariantResult(variant, history, model.num_parameters(),
                         _final(history, "summary", "loss"), _final(history, "summary", "accuracy"),
                         _final(history, "val", "loss"), _final(history, "val", "accuracy"))


COMPARISON_METRICS = (
    ("final_train_loss", True),
    ("final_val_loss", True),
    ("final_train_accuracy", False),
    ("final_val_accuracy", False),
)


def comparison_csv(base: VariantResult, glu: VariantResult) -> str:
    """One row per metric: both values, their difference and which variant came out ahead."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("metric", "baseline", "glu", "glu_minus_baseline", "better"))
    writer.writerow(("n_parameters", base.n_parameters, glu.n_parameters,
                     glu.n_parameters - base.n_parameters, "equal" if base.n_parameters == glu.n_parameters else "n/a"))
    for name, lower_is_better in COMPARISON_METRICS:
        b, g = getattr(base, name), getattr(glu, name)
        if b is None or g is None:
            continue
        if b == g:
            better = "tie"
        else:
            better = "glu" if (g < b) == lower_is_better else "baseline"
        writer.writerow((name, repr(float(b)), repr(float(g)), repr(float(g - b)), better))
    return buf.getvalue()


def output_dir(spec: ExperimentSpec) -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV) or spec.output_dir)


def run_experiment(spec: ExperimentSpec) -> dict:
    """Train every requested variant and write metrics, checkpoints and the spec copy."""
    out = output_dir(spec)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "spec.txt", format_spec(spec).encode("utf-8"))
    train, val, info = build_datasets(spec)
    results = {}
    for variant in spec.variants:
        target = out / variant if spec.variant == "both" else out
        results[variant] = run_variant(spec, variant, train, val, target)
    report = {"results": results, "info": info, "output_dir": out}
    if spec.variant == "both":
        text = comparison_csv(results["baseline"], results["glu"])
        atomic_write(out / "comparison.csv", text.encode("utf-8"))
        report["comparison"] = text
    if info:
        lines = "".join(f"{k} = {_format_value(v)}\n" for k, v in sorted(info.items()))
        atomic_write(out / "data_info.txt", lines.encode("utf-8"))
    return report
