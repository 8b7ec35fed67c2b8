"""Labelled seed derivation so each random consumer owns an independent stream."""

from __future__ import annotations

import zlib

import numpy as np

_MASK = (1 << 63) - 1


def derive_seed(master: int, label: str) -> int:
    """Stable 63-bit seed from a master seed and a consumer label."""
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(label.encode())])
    hi, lo = ss.generate_state(2, dtype=np.uint32)
    return ((int(hi) << 32) | int(lo)) & _MASK


def derive_rng(master: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, label))
