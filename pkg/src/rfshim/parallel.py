"""Bounded worker pool with order-preserving results."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

ENV_WORKERS = "SHIM_WORKERS"


def resolve_workers(flag_value: int | None) -> int:
    """Worker count: explicit flag, then SHIM_WORKERS, then available cores."""
    if flag_value is not None:
        if flag_value < 1:
            raise ValueError("workers must be >= 1")
        return flag_value
    env = os.environ.get(ENV_WORKERS)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def pmap(fn, items, workers: int) -> list:
    """Map ``fn`` over ``items``, preserving input order.

    ``workers == 1`` runs in-process; otherwise ``fn`` and items must be
    picklable. Results are deterministic regardless of scheduling because
    the executor yields them in submission order.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    chunksize = max(1, len(items) // (workers * 4))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=chunksize))
