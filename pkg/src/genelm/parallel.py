"""Worker-pool sizing and a fork-based parallel map for read-only model
work. GENELM_THREADS caps the pool (default: machine core count); values
of 1 or workloads too small to amortize a fork run serially."""

from __future__ import annotations

import multiprocessing
import os

_MIN_PARALLEL_ITEMS = 16

_worker_fn = None


def worker_count() -> int:
    raw = os.environ.get("GENELM_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        n = multiprocessing.cpu_count()
    return max(1, n)


def _call(item):
    return _worker_fn(item)


def parallel_map(fn, items: list, workers: int | None = None) -> list:
    """Order-preserving map; forks workers that inherit `fn` (and whatever
    it closes over) from the parent."""
    global _worker_fn
    items = list(items)
    if workers is None:
        workers = worker_count()
    workers = min(workers, len(items))
    if workers <= 1 or len(items) < _MIN_PARALLEL_ITEMS:
        return [fn(x) for x in items]
    _worker_fn = fn
    try:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(processes=workers) as pool:
            return pool.map(_call, items)
    finally:
        _worker_fn = None
