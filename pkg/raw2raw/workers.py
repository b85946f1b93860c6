# raw2raw/workers.py
"""Thread-pool configuration shared by the library modules.

Work is fanned out with joblib's thread backend and gathered in input order,
so the thread count changes wall time only.
"""
import logging
import os
from typing import Callable, Iterable, Optional, TypeVar

from joblib import Parallel, delayed

from raw2raw import config

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def resolve_threads(threads: Optional[int] = None) -> int:
    """Explicit count > RAW2RAW_THREADS > cpu count.

    None defers to the environment; 0 asks for the cpu count even when
    RAW2RAW_THREADS is set.
    """
    if threads is None:
        threads = config.RAW2RAW_THREADS
    if threads > 0:
        return int(threads)
    return max(1, os.cpu_count() or 1)


def map_ordered(fn: Callable[[T], R], items: Iterable[T], threads: Optional[int] = None) -> list[R]:
    items = list(items)
    n_jobs = min(resolve_threads(threads), max(1, len(items)))
    if n_jobs == 1:
        return [fn(it) for it in items]
    logger.debug("[WORKERS] %d items on %d threads", len(items), n_jobs)
    # joblib returns results in submission order
    return Parallel(n_jobs=n_jobs, prefer="threads")(delayed(fn)(it) for it in items)
