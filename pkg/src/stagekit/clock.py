"""Injectable clock, so credential expiry and fault timing run at test speed.

All *logic* time (token lifetimes, backoff waits, fault switch-over) goes
through a Clock. Wall-time measurement of transfer durations deliberately
does not: throughput numbers must reflect real elapsed time even when a
test drives logical time ten days in two seconds.
"""

from __future__ import annotations

import threading
import time
from typing import Protocol, runtime_checkable


@runtime_checkable
class Clock(Protocol):
    def now(self) -> float:
        """Current time in seconds (UTC epoch for the system clock)."""
        ...

    def sleep(self, seconds: float) -> None:
        ...


class SystemClock:
    """Real time; the default everywhere."""

    def now(self) -> float:
        return time.time()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class SimClock:
    """Manually advanced clock. ``sleep`` consumes simulated time instantly.

    Thread-safe: workers may sleep concurrently while a coordinator
    advances; time only moves forward.
    """

    def __init__(self, start: float = 0.0) -> None:
        self._t = start
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._t

    def advance(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("simulated time cannot move backwards")
        with self._lock:
            self._t += seconds

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            self.advance(seconds)


SYSTEM_CLOCK = SystemClock()
