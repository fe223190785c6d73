"""Worker-count control with thread-count-independent results.

Work is always split into the same fixed chunks regardless of how many workers
run them, and chunk results are merged in chunk order. BLAS is pinned to one
thread inside :func:`workers` so its internal reductions cannot vary either.
"""

from __future__ import annotations

import contextlib
import contextvars
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Iterator, TypeVar

from threadpoolctl import threadpool_limits

T = TypeVar("T")
R = TypeVar("R")

_workers: contextvars.ContextVar[int] = contextvars.ContextVar("strata_workers", default=1)

PIXEL_CHUNK = 16384
BAND_CHUNK = 32


def resolve_threads(threads: int | None = None) -> int:
    """Explicit value, else ``STRATA_THREADS``, else the number of cores."""
    if threads is None:
        env = os.environ.get("STRATA_THREADS")
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


@contextlib.contextmanager
def workers(threads: int | None = None) -> Iterator[int]:
    n = resolve_threads(threads)
    token = _workers.set(n)
    try:
        with threadpool_limits(limits=1, user_api="blas"):
            yield n
    finally:
        _workers.reset(token)


def map_ordered(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    items = list(items)
    n = _workers.get()
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def chunks(n: int, size: int) -> list[slice]:
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]
