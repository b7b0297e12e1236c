"""Parallel trial execution with deterministic, trial-ordered results."""

from __future__ import annotations

import logging
import os
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import TypeVar, cast

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

# Progress callback type
# Args: completed trials, total trials
ProgressCallback = Callable[[int, int], None]


def default_thread_count() -> int:
    """Bounded default worker count, as for I/O-light numpy workloads."""
    return min(32, (os.cpu_count() or 1) + 4)


def split_evenly(items: Sequence[T], parts: int) -> list[list[T]]:
    """Split ``items`` into at most ``parts`` contiguous, near-equal chunks."""
    parts = max(1, min(parts, len(items)))
    size, extra = divmod(len(items), parts)
    chunks: list[list[T]] = []
    start = 0
    for index in range(parts):
        stop = start + size + (1 if index < extra else 0)
        chunks.append(list(items[start:stop]))
        start = stop
    return [c for c in chunks if c]


class TrialExecutor:
    """Runs independent trials on a thread pool.

    Results are re-assembled in submission order, so any aggregation over
    them is identical for every thread count. Each trial must own its PRNG
    stream; nothing random is shared between workers.
    """

    def __init__(self, threads: int | None = None) -> None:
        """Initialize the executor.

        Args:
            threads: Worker count; 1 runs trials inline. Defaults to
                default_thread_count().
        """
        if threads is not None and threads < 1:
            raise ValueError(f"threads must be positive, got {threads}")
        self.threads = threads or default_thread_count()

    def _worker_count(self, total: int) -> int:
        if total <= 0:
            return 1
        return min(total, self.threads)

    def map_trials(
        self,
        fn: Callable[[T], R],
        items: Sequence[T],
        on_progress: ProgressCallback | None = None,
    ) -> list[R]:
        """Apply ``fn`` to every item and return results in item order.

        The first exception raised by a trial propagates after the pool
        shuts down.
        """
        total = len(items)
        workers = self._worker_count(total)
        if workers == 1:
            results_inline: list[R] = []
            for completed, item in enumerate(items, start=1):
                results_inline.append(fn(item))
                if on_progress:
                    on_progress(completed, total)
            return results_inline

        results: list[R | None] = [None] * total
        with ThreadPoolExecutor(max_workers=workers) as executor:
            futures = {
                executor.submit(fn, item): index for index, item in enumerate(items)
            }
            for completed, future in enumerate(as_completed(futures), start=1):
                results[futures[future]] = future.result()
                if on_progress:
                    on_progress(completed, total)
        logger.debug("Ran %d trials on %d threads", total, workers)
        return cast(list[R], results)
