"""Stable sub-seed derivation so results never depend on scheduling."""

import hashlib

import numpy as np


def derive_seed(base: int, *parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(base)).encode())
    for p in parts:
        h.update(b"\x1f")
        h.update(str(p).encode())
    return int.from_bytes(h.digest(), "little") >> 1


def make_rng(base: int, *parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base, *parts))
