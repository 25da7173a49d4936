"""
Unit tests for WorkerPool and run_parallel.
"""
import threading
import time

import pytest

from targeted_detector.worker_pool import WorkerPool, run_parallel


class TestWorkerPool:
    """Test cases for WorkerPool."""

    def test_initialization(self):
        """Slots are named in order."""
        pool = WorkerPool(3)
        assert len(pool) == 3
        assert pool.get_workers() == ["worker-0", "worker-1", "worker-2"]

    def test_at_least_one_worker(self):
        """Zero or negative counts still give one slot."""
        assert len(WorkerPool(0)) == 1
        assert len(WorkerPool(-2)) == 1

    def test_round_robin_selection(self):
        """Slots are handed out in rotation."""
        pool = WorkerPool(3)
        assert pool.get_next_worker() == "worker-0"
        assert pool.get_next_worker() == "worker-1"
        assert pool.get_next_worker() == "worker-2"
        assert pool.get_next_worker() == "worker-0"  # wraps around

    @pytest.mark.asyncio
    async def test_async_selection_rotates(self):
        """The locked variant follows the same rotation."""
        pool = WorkerPool(2)
        picks = [await pool.get_next_worker_async() for _ in range(4)]
        assert picks == ["worker-0", "worker-1", "worker-0", "worker-1"]

    @pytest.mark.asyncio
    async def test_map_keeps_input_order(self):
        """Results come back in submission order even when later jobs finish first."""

        def slow_square(x):
            time.sleep(0.01 * (5 - x))
            return x * x

        pool = WorkerPool(3)
        assert await pool.map(slow_square, range(5)) == [0, 1, 4, 9, 16]

    @pytest.mark.asyncio
    async def test_slot_runs_one_job_at_a_time(self):
        """Jobs on the same slot never overlap."""
        active = {}
        overlaps = []
        guard = threading.Lock()

        def job(item):
            slot = item % 2
            with guard:
                if active.get(slot):
                    overlaps.append(item)
                active[slot] = True
            time.sleep(0.005)
            with guard:
                active[slot] = False
            return item

        pool = WorkerPool(2)
        await pool.map(job, range(8))
        assert overlaps == []


class TestRunParallel:
    """The synchronous entry point."""

    def test_matches_sequential(self):
        """Any worker count gives the sequential result."""
        items = list(range(20))
        expected = [x * 3 + 1 for x in items]
        for workers in (1, 2, 4, 7):
            assert run_parallel(lambda x: x * 3 + 1, items, workers) == expected

    def test_empty_input(self):
        """No items, no results."""
        assert run_parallel(lambda x: x, [], 4) == []

    def test_errors_propagate(self):
        """A failing job raises out of run_parallel."""

        def boom(x):
            if x == 3:
                raise ValueError("bad item")
            return x

        with pytest.raises(ValueError, match="bad item"):
            run_parallel(boom, range(6), 2)
