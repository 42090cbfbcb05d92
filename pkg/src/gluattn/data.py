"""Patchification, byte tokenization, synthetic datasets, batching and raw-file readers."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, ShapeError
from .rng import make_rng
from .tensor import as_dtype

BYTE_VOCAB = 256
CIFAR_RECORD = 1 + 32 * 32 * 3


@dataclass
class Dataset:
    """Paired model inputs and integer targets.

    ``classify``: inputs are patches ``[N, n_patches, patch_dim]``, targets ``[N]``.
    ``lm``: inputs are token windows ``[N, T]``, targets the shifted windows ``[N, T]``.
    """

    inputs: np.ndarray
    targets: np.ndarray
    task: str

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ShapeError(f"{len(self.inputs)} inputs but {len(self.targets)} targets")

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.targets[idx], self.task)


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------

def patchify(img: np.ndarray, p: int) -> np.ndarray:
    """Tile ``img`` ([H, W, C] or [N, H, W, C]) into flattened p x p patches.

    Patches are ordered left-to-right then top-to-bottom; inside a patch the
    pixels are row-major with the channel varying fastest.
    """
    img = np.asarray(img)
    batched = img.ndim == 4
    if not batched:
        img = img[None]
    if img.ndim != 4:
        raise ShapeError(f"expected [H, W, C] or [N, H, W, C], got shape {img.shape}")
    n, h, w, c = img.shape
    if p <= 0 or h % p or w % p:
        raise ShapeError(f"patch size {p} does not divide image size {h}x{w}")
    out = (img.reshape(n, h // p, p, w // p, p, c)
              .transpose(0, 1, 3, 2, 4, 5)
              .reshape(n, (h // p) * (w // p), p * p * c))
    return out if batched else out[0]


def unpatchify(patches: np.ndarray, p: int, h: int, w: int, c: int = 3) -> np.ndarray:
    patches = np.asarray(patches)
    batched = patches.ndim == 3
    if not batched:
        patches = patches[None]
    n = patches.shape[0]
    if patches.shape[1:] != ((h // p) * (w // p), p * p * c) or h % p or w % p:
        raise ShapeError(f"patches of shape {patches.shape[1:]} do not tile a {h}x{w}x{c} image with p={p}")
    out = (patches.reshape(n, h // p, w // p, p, p, c)
                  .transpose(0, 1, 3, 2, 4, 5)
                  .reshape(n, h, w, c))
    return out if batched else out[0]


def _motif(k: int, size: int) -> np.ndarray:
    # 4 orientations x 4 spatial periods; colour mix keyed by k as well
    kind, period = k % 4, 2 + (k // 4) % 4
    r, c = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    if kind == 0:
        phase = r
    elif kind == 1:
        phase = c
    elif kind == 2:
        phase = r + c
    else:
        block = period - 1
        phase = r // block + c // block
        period = 2
    on = ((phase % period) < period / 2).astype(np.float64)
    colour = np.array([0.2 + 0.6 * ((k >> b) & 1) for b in range(3)])
    colour[(k + 1) % 3] = 0.9
    pattern = 0.1 + on[..., None] * colour[None, None, :]
    return np.clip(pattern, 0.0, 1.0)


def synth_images(n: int, classes: int = 10, seed: int = 0, size: int = 8,
                 noise: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Procedural ``size x size x 3`` images whose class is a stripe/checker motif.

    Labels cycle through ``0..classes-1`` so every class is equally represented
    (up to one sample). Noise is uniform in ``[-noise, noise]``, then clipped
    to ``[0, 1]``.
    """
    if not 1 <= classes <= 16:
        raise ConfigError(f"synth_images supports 1..16 classes, got {classes}")
    labels = np.arange(n) % classes
    motifs = np.stack([_motif(k, size) for k in range(classes)])
    pixels = motifs[labels]
    if noise:
        rng = make_rng(seed, "synth_images")
        pixels = pixels + rng.uniform(-noise, noise, size=pixels.shape)
    return np.clip(pixels, 0.0, 1.0), labels.astype(np.int64)


def image_dataset(pixels: np.ndarray, labels: np.ndarray, patch: int, dtype="f32") -> Dataset:
    return Dataset(patchify(pixels, patch).astype(as_dtype(dtype)), np.asarray(labels, dtype=np.int64), "classify")


def read_cifar_binary(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read a CIFAR-10 binary batch: per record one label byte then 3072 channel-planar pixels."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise ShapeError(f"{path}: size {raw.size} is not a multiple of the {CIFAR_RECORD}-byte record")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    pixels = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1) / 255.0
    return pixels, labels


# --------------------------------------------------------------------------
# text
# --------------------------------------------------------------------------

def byte_tokenize(text: bytes | str) -> np.ndarray:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> bytes:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= BYTE_VOCAB):
        raise ShapeError("byte ids must lie in 0..255")
    return ids.astype(np.uint8).tobytes()


_SUBJECTS = ["cat", "dog", "bird", "fish", "fox", "owl", "bee", "ant"]
_VERBS = ["sees", "likes", "finds", "hears"]
_OBJECTS = ["the sun", "a tree", "the moon", "a rock", "the sea", "a star"]


def synth_text(n_chars: int, seed: int = 0) -> np.ndarray:
    """Byte stream built from a small sentence grammar plus key=value records.

    Two line kinds are mixed at random: ``the <subject> <verb> <object>.`` and
    ``<key>=<value>;`` where the value is a fixed function of the key, so the
    stream has plenty of exploitable next-byte structure.
    """
    rng = make_rng(seed, "synth_text")
    parts: list[str] = []
    total = 0
    while total < n_chars:
        if rng.random() < 0.6:
            line = (f"the {_SUBJECTS[rng.integers(len(_SUBJECTS))]} "
                    f"{_VERBS[rng.integers(len(_VERBS))]} "
                    f"{_OBJECTS[rng.integers(len(_OBJECTS))]}.\n")
        else:
            key = int(rng.integers(10))
            line = f"k{key}=v{(3 * key + 1) % 10};\n"
        parts.append(line)
        total += len(line)
    return byte_tokenize("".join(parts)[:n_chars])


def read_text(path: str | Path) -> np.ndarray:
    return byte_tokenize(Path(path).read_bytes())


def byte_entropy(ids) -> float:
    """Empirical unigram entropy in nats per byte."""
    counts = np.bincount(np.asarray(ids, dtype=np.int64), minlength=BYTE_VOCAB)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def lm_windows(ids: np.ndarray, context: int, stride: int | None = None) -> Dataset:
    """Slice a token stream into ``context``-length windows with next-token targets."""
    ids = np.asarray(ids, dtype=np.int64)
    stride = stride or context
    if len(ids) < context + 1:
        raise ShapeError(f"need at least context+1={context + 1} tokens, got {len(ids)}")
    starts = np.arange(0, len(ids) - context, stride)
    offsets = np.arange(context)
    inputs = ids[starts[:, None] + offsets]
    targets = ids[starts[:, None] + offsets + 1]
    return Dataset(inputs, targets, "lm")


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------

def batch_indices(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = make_rng(seed, "shuffle", epoch).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def batches(dataset: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[Dataset]:
    """Shuffled batches for one epoch; the order depends only on ``(seed, epoch)``."""
    for idx in batch_indices(len(dataset), batch_size, seed, epoch):
        yield dataset.subset(idx)
