"""Wall-clock and virtual-clock abstractions.

All latency-sensitive code sleeps and reads time through a Clock so that
runs can be replayed deterministically under the virtual clock while the
same code paths exercise real overlap behaviour under the wall clock.
"""

from __future__ import annotations

import asyncio
import heapq
import time


class Clock:
    def now(self) -> float:
        """Monotonic seconds."""
        raise NotImplementedError

    def wall_time(self) -> float:
        """Seconds since the Unix epoch, for trace timestamps."""
        raise NotImplementedError

    async def sleep(self, delay: float) -> None:
        raise NotImplementedError

    async def drive(self, coro):
        """Run a coroutine to completion under this clock."""
        raise NotImplementedError


class WallClock(Clock):
    def now(self) -> float:
        return time.monotonic()

    def wall_time(self) -> float:
        return time.time()

    async def sleep(self, delay: float) -> None:
        await asyncio.sleep(max(0.0, delay))

    async def drive(self, coro):
        return await coro


class VirtualClock(Clock):
    """Deterministic clock: time advances only when every task is asleep.

    Sleepers park on a heap keyed by (deadline, registration order); the
    driver lets runnable tasks settle, then jumps to the earliest deadline.
    Scheduling is FIFO within asyncio, so a fixed program yields a fixed
    interleaving and byte-identical timings.
    """

    # Yield this many times to let runnable task chains settle before
    # advancing time. Chains longer than this would stall the driver.
    _SETTLE_YIELDS = 64

    def __init__(self, start: float = 0.0, epoch: float = 0.0):
        self._now = start
        self._epoch = epoch
        self._heap: list[tuple[float, int, asyncio.Future]] = []
        self._seq = 0

    def now(self) -> float:
        return self._now

    def wall_time(self) -> float:
        return self._epoch + self._now

    async def sleep(self, delay: float) -> None:
        if delay <= 0:
            await asyncio.sleep(0)
            return
        fut = asyncio.get_running_loop().create_future()
        heapq.heappush(self._heap, (self._now + delay, self._seq, fut))
        self._seq += 1
        await fut

    async def drive(self, coro):
        task = asyncio.ensure_future(coro)
        try:
            while not task.done():
                for _ in range(self._SETTLE_YIELDS):
                    if task.done():
                        break
                    await asyncio.sleep(0)
                if task.done():
                    break
                if not self._heap:
                    raise RuntimeError(
                        "virtual clock stalled: no sleeper to advance to"
                    )
                deadline, _, fut = heapq.heappop(self._heap)
                self._now = max(self._now, deadline)
                if not fut.done():
                    fut.set_result(None)
        finally:
            if not task.done():
                task.cancel()
        return task.result()
