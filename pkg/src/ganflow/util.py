"""Seed derivation and worker-pool helpers."""

from __future__ import annotations

import os
import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """Independent, reproducible stream for (seed, tags).

    Tags are hashed with crc32 so the stream depends only on the values, not
    on call order; identical (seed, tags) always yields the same stream.
    """
    key = tuple(
        zlib.crc32(str(t).encode("utf-8")) if not isinstance(t, (int, np.integer)) else int(t)
        for t in tags
    )
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=int(seed), spawn_key=key)))


def worker_count() -> int:
    """Worker cap from GANFLOW_THREADS (default 1)."""
    raw = os.environ.get("GANFLOW_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 1
    return max(1, n)


def ordered_map(fn, items):
    """Map preserving input order; fans out when GANFLOW_THREADS > 1.

    Work items must carry their own derived seeds so results do not depend
    on the worker count.
    """
    items = list(items)
    n = worker_count()
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
