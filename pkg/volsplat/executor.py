"""Ordered thread-pool map used by the renderers, backward passes and loaders."""

from collections.abc import Callable, Iterable
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar

from volsplat.config import settings

T = TypeVar("T")
R = TypeVar("R")


def map_ordered(fn: Callable[[T], R], items: Iterable[T], workers: int | None = None) -> list[R]:
    """Apply fn to every item and return results in submission order.

    Callers reduce the returned list front to back, so the result does not
    depend on the worker count.
    """
    items = list(items)
    workers = settings.threads if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))
