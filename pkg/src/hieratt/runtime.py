"""Process-wide runtime knobs: worker threads and debug checks.

Parallelism is only ever applied to independent per-item work (one image,
one validation forward). Each item writes to its own output slot, so
results are bit-identical for every thread count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

from .errors import ConfigError

_ENV_VAR = "HIERATT_THREADS"

T = TypeVar("T")
R = TypeVar("R")


def thread_count() -> int:
    """Worker thread count from HIERATT_THREADS. 0 means auto, unset means 1."""
    raw = os.environ.get(_ENV_VAR)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{_ENV_VAR} must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError(f"{_ENV_VAR} must be >= 0, got {n}")
    if n == 0:
        return os.cpu_count() or 1
    return n


def parallel_map(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    """Map fn over items, in order, on up to thread_count() workers."""
    seq = list(items)
    workers = min(thread_count(), len(seq)) if seq else 1
    if workers <= 1:
        return [fn(item) for item in seq]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, seq))
