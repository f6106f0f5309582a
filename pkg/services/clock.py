"""
Injected time and deferred work.

Server logic never reads the wall clock directly: it asks its Clock for
`now_ms` and hands delayed work to a Scheduler. Real processes use the system
clock and timer threads; simulations and tests drive a ManualClock through a
ManualScheduler so expiry and flooding are reproducible.
"""
import heapq
import itertools
import logging
import threading
import time
from typing import Callable, Protocol

logger = logging.getLogger("mo.clock")


class Clock(Protocol):
    def now_ms(self) -> int: ...

    def sleep_ms(self, ms: int) -> None: ...


class Cancellable(Protocol):
    def cancel(self) -> None: ...


class Scheduler(Protocol):
    def call_later(self, delay_ms: int, fn: Callable[[], None]) -> Cancellable: ...


class SystemClock:
    def now_ms(self) -> int:
        return time.time_ns() // 1_000_000

    def sleep_ms(self, ms: int) -> None:
        if ms > 0:
            time.sleep(ms / 1000)


class ManualClock:
    """A clock that only moves when told to. Sleeping advances it."""

    def __init__(self, start_ms: int = 1):
        self._now = start_ms
        self._lock = threading.Lock()

    def now_ms(self) -> int:
        return self._now

    def set(self, ms: int) -> None:
        with self._lock:
            self._now = max(self._now, ms)

    def advance(self, ms: int) -> int:
        with self._lock:
            self._now += max(0, ms)
            return self._now

    def sleep_ms(self, ms: int) -> None:
        self.advance(ms)


class ThreadScheduler:
    """Runs callbacks on daemon timer threads."""

    def __init__(self):
        self._timers: set[threading.Timer] = set()
        self._lock = threading.Lock()
        self._closed = False

    def call_later(self, delay_ms: int, fn: Callable[[], None]) -> threading.Timer:
        def run():
            with self._lock:
                self._timers.discard(timer)
            try:
                fn()
            except Exception:
                logger.exception("Scheduled task failed")

        timer = threading.Timer(max(0, delay_ms) / 1000, run)
        timer.daemon = True
        with self._lock:
            if self._closed:
                return timer
            self._timers.add(timer)
        timer.start()
        return timer

    def shutdown(self) -> None:
        with self._lock:
            self._closed = True
            timers, self._timers = self._timers, set()
        for t in timers:
            t.cancel()


class _Event:
    __slots__ = ("fn", "cancelled")

    def __init__(self, fn: Callable[[], None]):
        self.fn = fn
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class ManualScheduler:
    """
    A single time-ordered event queue over a ManualClock.

    Events due at the same instant run in the order they were scheduled.
    """

    def __init__(self, clock: ManualClock):
        self.clock = clock
        self._queue: list[tuple[int, int, _Event]] = []
        self._seq = itertools.count()

    def call_at(self, at_ms: int, fn: Callable[[], None]) -> _Event:
        event = _Event(fn)
        heapq.heappush(self._queue, (at_ms, next(self._seq), event))
        return event

    def call_later(self, delay_ms: int, fn: Callable[[], None]) -> _Event:
        return self.call_at(self.clock.now_ms() + max(0, delay_ms), fn)

    def __len__(self) -> int:
        return sum(1 for _, _, e in self._queue if not e.cancelled)

    def next_due(self) -> int | None:
        while self._queue and self._queue[0][2].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0][0] if self._queue else None

    def run_until(self, until_ms: int) -> int:
        """Run every event due at or before until_ms, then set the clock to until_ms."""
        ran = 0
        while True:
            due = self.next_due()
            if due is None or due > until_ms:
                break
            _, _, event = heapq.heappop(self._queue)
            self.clock.set(due)
            event.fn()
            ran += 1
        self.clock.set(until_ms)
        return ran
