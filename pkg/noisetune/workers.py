"""
Thread work pool for independent solver runs.

Finite-difference perturbations and per-trajectory LEO sampling are independent work items.
``run_work_items`` hands them to a ``cereggii.ThreadSet`` of workers that claim items through a
shared ``AtomicInt64`` cursor and publish results into an ``AtomicDict``. Results come back in
item order, so any reduction over them is deterministic whatever the thread count.
"""

import logging
import threading
from collections.abc import Callable, Sequence

import cereggii

logger = logging.getLogger(__name__)


class _ThreadingSet:
    """Plain ``threading`` stand-in for the parts of ``cereggii.ThreadSet`` used here."""

    def __init__(self, *threads):
        self._threads = threads

    def start(self):
        for t in self._threads:
            t.start()

    def join(self):
        for t in self._threads:
            t.join()

    def start_and_join(self):
        self.start()
        self.join()

    @classmethod
    def range(cls, n):
        def decorator(target):
            threads = [threading.Thread(target=target, args=(i,)) for i in range(n)]
            return cls(*threads)

        return decorator


# Older cereggii releases ship the atomics without ThreadSet.
ThreadSet = getattr(cereggii, "ThreadSet", None)
if ThreadSet is None:
    logger.warning("cereggii.ThreadSet not found; using standard threading")
    ThreadSet = _ThreadingSet


def run_work_items[T](items: Sequence[Callable[[], T]], n_threads: int = 1) -> list[T]:
    """Run every zero-argument callable in ``items`` and return their results in order.

    With ``n_threads <= 1`` items run inline. Otherwise ``min(n_threads, len(items))`` worker
    threads drain the items; the exception of the lowest failing index is re-raised (the
    original exception object, so callers can inspect its type).
    """
    if n_threads <= 1 or len(items) <= 1:
        return [item() for item in items]

    cursor = cereggii.AtomicInt64(0)
    results = cereggii.AtomicDict()
    failures = cereggii.AtomicDict()
    total = len(items)

    @ThreadSet.range(min(n_threads, total))
    def worker(thread_id):
        while True:
            index = cursor.increment_and_get() - 1
            if index >= total:
                return
            try:
                results[index] = items[index]()
            except Exception as e:  # re-raised in the caller thread after join
                failures[index] = e

    worker.start_and_join()

    failed = sorted(i for i in range(total) if failures.get(i, None) is not None)
    if failed:
        raise failures[failed[0]]
    return [results[i] for i in range(total)]
