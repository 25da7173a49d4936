"""
Worker pool with round-robin job placement.

Each job is handed to the next worker slot in rotation; a slot runs its jobs
one at a time in a thread, and slots run side by side. Results come back in
submission order, so callers see the same output for any worker count.
"""
import asyncio
import logging
from collections import deque
from typing import Callable, Dict, Iterable, List, Optional, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class WorkerPool:
    """
    Manages a fixed set of worker slots and implements round-robin selection.
    """

    def __init__(self, workers: int):
        """
        Initialize the pool.

        Args:
            workers: Number of worker slots (at least 1)
        """
        names = [f"worker-{i}" for i in range(max(1, workers))]
        # deque gives O(1) rotation
        self._workers = deque(names)
        self._slot_locks: Dict[str, asyncio.Lock] = {}
        self._lock = asyncio.Lock()

    def get_next_worker(self) -> Optional[str]:
        """
        Get the next worker slot using round-robin order.

        Returns:
            Name of the next slot, or None if the pool is empty
        """
        if not self._workers:
            return None
        worker = self._workers[0]
        self._workers.rotate(-1)
        return worker

    async def get_next_worker_async(self) -> Optional[str]:
        """Lock-protected version of get_next_worker."""
        async with self._lock:
            return self.get_next_worker()

    def get_workers(self) -> List[str]:
        return list(self._workers)

    def __len__(self) -> int:
        return len(self._workers)

    def _slot_lock(self, worker: str) -> asyncio.Lock:
        if worker not in self._slot_locks:
            self._slot_locks[worker] = asyncio.Lock()
        return self._slot_locks[worker]

    async def _run_on(self, worker: str, fn: Callable[[T], R], item: T) -> R:
        async with self._slot_lock(worker):
            return await asyncio.to_thread(fn, item)

    async def map(self, fn: Callable[[T], R], items: Iterable[T]) -> List[R]:
        """Apply ``fn`` to every item across the slots; results keep input order."""
        jobs = []
        for item in items:
            worker = await self.get_next_worker_async()
            jobs.append(self._run_on(worker, fn, item))
        logger.debug("dispatching %d jobs over %d workers", len(jobs), len(self))
        return list(await asyncio.gather(*jobs))


def run_parallel(fn: Callable[[T], R], items: Iterable[T], workers: int) -> List[R]:
    """Synchronous entry point: plain map for one worker, pooled otherwise."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    return asyncio.run(WorkerPool(workers).map(fn, items))
