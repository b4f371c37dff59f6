"""Order-preserving process-pool map.

Tasks are closures over problem objects that hold lambdas, which do not
pickle.  The worker function is therefore handed to the pool through a
fork-inherited global; only the items and the results cross process
boundaries.  Results come back in input order, so output is identical for
any worker count.
"""

from __future__ import annotations

import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, List, TypeVar

T = TypeVar("T")
R = TypeVar("R")

_TASK: Callable = None  # type: ignore[assignment]


def _install(fn):
    global _TASK
    _TASK = fn


def _call(item):
    return _TASK(item)


def parallel_map(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> List[R]:
    items = list(items)
    if workers <= 1 or len(items) <= 1 or "fork" not in mp.get_all_start_methods():
        return [fn(it) for it in items]
    ctx = mp.get_context("fork")
    chunk = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx, initializer=_install, initargs=(fn,)) as pool:
        return list(pool.map(_call, items, chunksize=chunk))
