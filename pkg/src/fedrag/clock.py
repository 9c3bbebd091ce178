"""Clock abstraction so deadline and TTL logic is testable without real sleeps."""

from __future__ import annotations

import time


class Clock:
    """Source of monotonic time in seconds."""

    def now(self) -> float:
        raise NotImplementedError


class SystemClock(Clock):
    def now(self) -> float:
        return time.monotonic()


class VirtualClock(Clock):
    """Manually advanced clock used by the deterministic simulation."""

    def __init__(self, start: float = 0.0) -> None:
        self._now = float(start)

    def now(self) -> float:
        return self._now

    def advance(self, dt: float) -> None:
        if dt < 0:
            raise ValueError("cannot advance a clock backwards")
        self._now += dt

    def advance_to(self, t: float) -> None:
        if t > self._now:
            self._now = t
