"""
Ordered thread-pool mapping.

Results always come back in input order, so reductions over them are
deterministic regardless of the worker count.
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, TypeVar

from .config import settings

T = TypeVar("T")
R = TypeVar("R")

_thread_cap: Optional[int] = None


def set_thread_cap(threads: Optional[int]) -> None:
    """Cap the worker count used by ``map_ordered`` (None restores the default)."""
    global _thread_cap
    if threads is not None and threads < 1:
        raise ValueError("thread cap must be at least 1")
    _thread_cap = threads


def thread_cap() -> int:
    return _thread_cap or settings.worker_count()


def map_ordered(fn: Callable[[T], R], items: Sequence[T], threads: Optional[int] = None) -> List[R]:
    workers = min(threads or thread_cap(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
