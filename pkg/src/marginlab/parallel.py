"""Ordered process-pool map with a global worker cap."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

THREADS_ENV = "MARGINLAB_THREADS"


def worker_count(jobs: int | None) -> int:
    """``jobs`` clipped to ``[1, MARGINLAB_THREADS]`` (the cap is optional)."""
    n = max(1, int(jobs or 1))
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
    return n


def ordered_map(fn, items, jobs: int | None = 1) -> list:
    """``[fn(x) for x in items]``, optionally across processes; order is preserved."""
    items = list(items)
    n = min(worker_count(jobs), max(1, len(items)))
    if n == 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
