"""Deterministic Monte-Carlo fan-out over sample indices."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

import numpy as np

T = TypeVar("T")


class SampleFailure(RuntimeError):
    def __init__(self, failures: dict[int, BaseException]):
        self.failures = failures
        idx = ", ".join(str(i) for i in sorted(failures))
        super().__init__(f"samples failed: [{idx}]")


def default_threads() -> int:
    env = os.environ.get("MONOHOM_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def map_samples(func: Callable[[int], T], indices: Iterable[int], threads: int | None = None) -> list[T]:
    """Evaluate ``func`` on each index; results come back in index order."""
    indices = list(indices)
    threads = default_threads() if threads is None else max(1, int(threads))
    failures: dict[int, BaseException] = {}

    def guarded(i):
        try:
            return func(i)
        except Exception as exc:  # collected and re-raised with all failing indices
            failures[i] = exc
            return None

    if threads == 1:
        results = [guarded(i) for i in indices]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(guarded, indices))
    if failures:
        raise SampleFailure(failures) from next(iter(failures.values()))
    return results


def mean_and_stderr(values) -> tuple[np.ndarray, np.ndarray]:
    """Componentwise mean and standard error along the first axis (zero error for one sample)."""
    v = np.asarray(values, dtype=float)
    m = v.mean(axis=0)
    if v.shape[0] < 2:
        return m, np.zeros_like(m)
    return m, v.std(axis=0, ddof=1) / np.sqrt(v.shape[0])
