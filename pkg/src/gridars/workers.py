"""Worker pools for the independent rollout chunks of one ARS iteration.

Chunks are disjoint slices of the direction list.  Because every rollout
in the batched engine is row-independent, results do not depend on the
number of workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np


class SerialPool:
    workers = 1

    def split(self, n: int) -> list[np.ndarray]:
        return [np.arange(n)]

    def map(self, fn, chunks):
        return [fn(c) for c in chunks]

    def close(self) -> None:
        pass


class ThreadPool:
    """Thread workers; the numba kernels release the GIL."""

    def __init__(self, workers: int):
        if workers < 1:
            raise ValueError("worker count must be >= 1")
        self.workers = int(workers)
        self._ex = ThreadPoolExecutor(max_workers=self.workers)

    def split(self, n: int) -> list[np.ndarray]:
        return [c for c in np.array_split(np.arange(n), min(self.workers, max(n, 1))) if len(c)]

    def map(self, fn, chunks):
        return list(self._ex.map(fn, chunks))

    def close(self) -> None:
        self._ex.shutdown(wait=True)


def make_pool(workers: int):
    return SerialPool() if workers <= 1 else ThreadPool(workers)
