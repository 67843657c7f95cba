"""Clocks. Every component reads time through one of these, never directly."""

import time


class WallClock:
    def now(self) -> float:
        return time.time()


class SimClock:
    """Virtual clock advanced explicitly by a driver; never moves backwards."""

    def __init__(self, start: float = 0.0):
        self._now = float(start)

    def now(self) -> float:
        return self._now

    def advance_to(self, t: float) -> None:
        if t < self._now:
            raise ValueError(f"clock cannot go back from {self._now} to {t}")
        self._now = t

    def advance(self, seconds: float) -> None:
        self.advance_to(self._now + seconds)
