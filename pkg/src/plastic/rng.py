"""Named random streams.

Every stream is a PCG64 generator seeded by a numpy ``SeedSequence`` built from
``(master_seed, run_index, crc32(stream_name))``. Streams with different names or
run indices are statistically independent, and adding a new stream never shifts
the values drawn from existing ones.
"""
from __future__ import annotations

import zlib

import numpy as np

ALGORITHM = "numpy.PCG64 via SeedSequence(master_seed, run_index, crc32(name))"


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, run_index: int = 0) -> np.random.Generator:
    if seed < 0 or run_index < 0:
        raise ValueError(f"seeds must be non-negative, got seed={seed}, run_index={run_index}")
    ss = np.random.SeedSequence([int(seed), int(run_index), stream_key(name)])
    return np.random.Generator(np.random.PCG64(ss))


def int_seed(seed: int, name: str, run_index: int = 0) -> int:
    """A 32-bit integer seed drawn from the named stream (for APIs that take ints)."""
    return int(stream(seed, name, run_index).integers(0, 2**31 - 1))
