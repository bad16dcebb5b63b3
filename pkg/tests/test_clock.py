import asyncio
import time

import pytest

from agentcache.clock import VirtualClock, WallClock

from conftest import drive, run


class TestWallClock:
    def test_now_is_monotonic(self):
        clock = WallClock()
        a = clock.now()
        b = clock.now()
        assert b >= a

    def test_sleep_takes_real_time(self):
        clock = WallClock()

        async def main():
            start = clock.now()
            await clock.sleep(0.05)
            return clock.now() - start

        assert run(main()) >= 0.045

    def test_negative_sleep_clamped(self):
        clock = WallClock()
        run(clock.sleep(-1.0))

    def test_wall_time_near_system_time(self):
        assert abs(WallClock().wall_time() - time.time()) < 1.0


class TestVirtualClock:
    def test_time_only_advances_on_sleep(self):
        clock = VirtualClock()

        async def main():
            assert clock.now() == 0.0
            await asyncio.sleep(0)
            assert clock.now() == 0.0
            await clock.sleep(2.5)
            return clock.now()

        assert drive(clock, main()) == 2.5

    def test_concurrent_sleeps_overlap(self):
        clock = VirtualClock()
        log = []

        async def sleeper(name, delay):
            await clock.sleep(delay)
            log.append((name, clock.now()))

        async def main():
            await asyncio.gather(sleeper("b", 2.0), sleeper("a", 1.0))

        drive(clock, main())
        # Wall time equals the max, not the sum, and order follows deadlines.
        assert log == [("a", 1.0), ("b", 2.0)]
        assert clock.now() == 2.0

    def test_ties_break_in_registration_order(self):
        clock = VirtualClock()
        log = []

        async def sleeper(name):
            await clock.sleep(1.0)
            log.append(name)

        async def main():
            await asyncio.gather(sleeper("first"), sleeper("second"))

        drive(clock, main())
        assert log == ["first", "second"]

    def test_deterministic_interleaving(self):
        def trace():
            clock = VirtualClock()
            log = []

            async def worker(name, delays):
                for d in delays:
                    await clock.sleep(d)
                    log.append((name, clock.now()))

            async def main():
                await asyncio.gather(
                    worker("x", [0.3, 0.3]), worker("y", [0.2, 0.5]), worker("z", [0.6])
                )

            drive(clock, main())
            return log

        assert trace() == trace()

    def test_stall_detection(self):
        clock = VirtualClock()

        async def main():
            await asyncio.get_running_loop().create_future()  # never resolves

        with pytest.raises(RuntimeError, match="stalled"):
            drive(clock, main())

    def test_runs_instantly_in_real_time(self):
        clock = VirtualClock()

        async def main():
            await clock.sleep(3600.0)

        start = time.monotonic()
        drive(clock, main())
        assert time.monotonic() - start < 1.0
        assert clock.now() == 3600.0

    def test_wall_time_tracks_epoch(self):
        clock = VirtualClock(epoch=1000.0)

        async def main():
            await clock.sleep(5.0)

        drive(clock, main())
        assert clock.wall_time() == 1005.0

    def test_zero_sleep_yields_without_advancing(self):
        clock = VirtualClock()

        async def main():
            await clock.sleep(0.0)
            return clock.now()

        assert drive(clock, main()) == 0.0
