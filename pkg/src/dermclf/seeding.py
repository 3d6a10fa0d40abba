"""Named random streams fanned out from one top-level seed.

Streams are keyed by integers (epoch, step, sample index, ...) rather than
advanced statefully, so results never depend on iteration order, worker count
or whether a run was resumed from a checkpoint.
"""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = {"shuffle": 1, "augment": 2, "dropout": 3, "tta": 4, "init": 5}


def _key(name: str) -> int:
    try:
        return STREAMS[name]
    except KeyError:
        raise ValueError(f"unknown random stream {name!r}") from None


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, _key(name), *(int(k) for k in keys)])


def torch_seed(seed: int, name: str, *keys: int) -> int:
    return int(stream(seed, name, *keys).integers(0, 2**63 - 1))


def text_key(text: str) -> int:
    """Stable (process-independent) integer key for a string id."""
    return zlib.crc32(text.encode("utf-8"))
