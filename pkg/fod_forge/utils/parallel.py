"""Thread-count resolution and the object-level process pool.

Numba's default threading layer is not safe to enter from several Python
threads at once, so object-level parallelism uses processes. Kernel outputs do
not depend on the number of threads, which keeps every map deterministic.
"""

import logging
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Generic, Iterable, List, Optional, TypeVar

import numba

logger = logging.getLogger(__name__)

THREADS_ENV = "FOD_FORGE_THREADS"

T = TypeVar("T")
R = TypeVar("R")


@dataclass
class BatchResult(Generic[R]):
    """Per-object outcome of a batch; exactly one of value and error is set."""

    object_id: int
    value: Optional[R] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def resolve_threads(threads: Optional[int] = None) -> int:
    """Explicit value, else FOD_FORGE_THREADS, else the CPU count"""
    if threads is None:
        env_value = os.getenv(THREADS_ENV)
        if env_value:
            try:
                threads = int(env_value)
            except ValueError:
                logger.warning("Ignoring non-integer %s=%r", THREADS_ENV, env_value)
    if threads is None:
        threads = os.cpu_count() or 1
    return max(1, int(threads))


def set_kernel_threads(threads: int) -> int:
    """Bound the numba kernel thread pool; returns the value applied"""
    applied = max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(applied)
    return applied


def _init_worker(kernel_threads: int) -> None:
    set_kernel_threads(kernel_threads)


def parallel_map(fn: Callable[[T], R], items: Iterable[T], workers: int) -> List[R]:
    """Map fn over items, preserving input order.

    fn must be a module-level callable so it can be pickled.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    workers = min(workers, len(items))
    kernel_threads = max(1, resolve_threads() // workers)
    context = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(
        max_workers=workers,
        mp_context=context,
        initializer=_init_worker,
        initargs=(kernel_threads,),
    ) as pool:
        return list(pool.map(fn, items))
