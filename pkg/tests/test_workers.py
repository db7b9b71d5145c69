"""Tests for the ordered thread work pool."""

import threading
import unittest
from unittest import mock

from noisetune import workers
from noisetune.errors import RankError
from noisetune.workers import run_work_items


def constant(value):
    return lambda: value


def raising(variable):
    def run():
        raise RankError(variable)

    return run


class TestRunWorkItems(unittest.TestCase):
    def test_results_in_item_order(self):
        items = [constant(i * i) for i in range(50)]
        for n_threads in (1, 2, 4, 8):
            with self.subTest(n_threads=n_threads):
                self.assertEqual(run_work_items(items, n_threads), [i * i for i in range(50)])

    def test_empty(self):
        self.assertEqual(run_work_items([], 4), [])

    def test_every_item_runs_once(self):
        lock = threading.Lock()
        seen = []

        def item(i):
            def run():
                with lock:
                    seen.append(i)
                return i

            return run

        run_work_items([item(i) for i in range(40)], 3)
        self.assertEqual(sorted(seen), list(range(40)))

    def test_lowest_failing_index_is_raised(self):
        items = [constant(0), raising(1), constant(2), raising(3)]
        for n_threads in (1, 3):
            with self.subTest(n_threads=n_threads), self.assertRaises(RankError) as ctx:
                run_work_items(items, n_threads)
            self.assertEqual(ctx.exception.variable, 1)

    def test_threading_fallback_runs_items(self):
        with mock.patch.object(workers, "ThreadSet", workers._ThreadingSet):
            self.assertEqual(run_work_items([constant(i) for i in range(20)], 4), list(range(20)))
            with self.assertRaises(RankError):
                run_work_items([constant(0), raising(2)], 2)


if __name__ == "__main__":
    unittest.main()
