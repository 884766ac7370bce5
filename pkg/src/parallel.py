import os
import threading
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")

_local = threading.local()


def thread_count() -> int:
    # 0 (or unset) means one worker per CPU
    value = int(os.getenv("T4D_THREADS", "0") or 0)
    if value <= 0:
        return os.cpu_count() or 1
    return value


def in_worker() -> bool:
    return getattr(_local, "in_worker", False)


def _as_worker(fn: Callable[[T], R]) -> Callable[[T], R]:
    def run(item: T) -> R:
        _local.in_worker = True
        try:
            return fn(item)
        finally:
            _local.in_worker = False

    return run


def ordered_map(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    """Apply fn to every item, possibly concurrently, returning results in input order.

    Callers reduce the returned list sequentially, so sums come out identical
    for any T4D_THREADS value. A map issued from inside a worker runs inline,
    so at most T4D_THREADS threads are busy however deep the calls nest.
    """
    items = list(items)
    workers = min(thread_count(), len(items))
    if workers <= 1 or in_worker():
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_as_worker(fn), items))
