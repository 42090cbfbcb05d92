"""Seed derivation.

Every random draw in the package goes through :func:`make_rng`. A generator is
keyed by an integer seed plus any number of string/int labels, so e.g. the
initial value of ``blocks.0.attn.w_q`` depends only on ``(seed, name)`` and not
on how many other parameters were drawn before it.

The bit generator is numpy's PCG64 fed through ``SeedSequence``; string labels
are folded to integers with CRC-32. Both are stable across numpy releases, so a
given seed reproduces the same numbers on any install.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(label: int | str) -> int:
    if isinstance(label, str):
        return zlib.crc32(label.encode("utf-8"))
    if label < 0:
        raise ValueError(f"seed labels must be non-negative, got {label}")
    return int(label)


def make_rng(seed: int, *labels: int | str) -> np.random.Generator:
    entropy = [_key(seed)] + [_key(label) for label in labels]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
