"""Order-preserving map over a process pool.

Jobs must be pure given their arguments (seeds travel inside the arguments),
so results never depend on worker count or scheduling.
"""
from __future__ import annotations

import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def map_ordered(fn: Callable[[T], R], jobs: Iterable[T], workers: int = 1) -> list[R]:
    jobs = list(jobs)
    if workers is None or workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    chunk = max(1, len(jobs) // (4 * workers))
    ctx = mp.get_context("fork")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as ex:
        return list(ex.map(fn, jobs, chunksize=chunk))
