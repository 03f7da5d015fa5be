"""Deterministic chunked parallel map over fork-started worker processes.

Work is cut into fixed-size chunks that do not depend on the number of
workers, and results come back in chunk order, so any reduction over them
is identical for every ``jobs`` value.
"""
from __future__ import annotations

import multiprocessing as mp
import os
from typing import Any, Callable

_SHARED: dict[int, Any] = {}


def _run(args):
    key, fn, lo, hi = args
    return fn(_SHARED[key], lo, hi)


def _run_item(args):
    key, fn, i = args
    return fn(_SHARED[key], i)


def _pool(jobs: int):
    if "fork" not in mp.get_all_start_methods():
        return None
    return mp.get_context("fork").Pool(jobs)


def chunk_ranges(n: int, chunk: int) -> list[tuple[int, int]]:
    return [(lo, min(lo + chunk, n)) for lo in range(0, n, max(chunk, 1))]


def map_chunks(fn: Callable, data, n: int, jobs: int = 1, chunk: int = 1024) -> list:
    """``[fn(data, lo, hi) for each chunk]`` evaluated on up to ``jobs`` processes.

    ``fn`` must be a module-level function. ``data`` reaches the workers
    through fork inheritance, never by pickling.
    """
    ranges = chunk_ranges(n, chunk)
    if jobs <= 1 or len(ranges) <= 1:
        return [fn(data, lo, hi) for lo, hi in ranges]
    key = id(data)
    _SHARED[key] = data
    try:
        pool = _pool(min(jobs, len(ranges)))
        if pool is None:
            return [fn(data, lo, hi) for lo, hi in ranges]
        with pool:
            return pool.map(_run, [(key, fn, lo, hi) for lo, hi in ranges], chunksize=1)
    finally:
        del _SHARED[key]


def map_items(fn: Callable, data, n: int, jobs: int = 1) -> list:
    """``[fn(data, i) for i in range(n)]`` on up to ``jobs`` processes."""
    if jobs <= 1 or n <= 1:
        return [fn(data, i) for i in range(n)]
    key = id(data)
    _SHARED[key] = data
    try:
        pool = _pool(min(jobs, n))
        if pool is None:
            return [fn(data, i) for i in range(n)]
        with pool:
            return pool.map(_run_item, [(key, fn, i) for i in range(n)], chunksize=1)
    finally:
        del _SHARED[key]


def available_cpus() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1
