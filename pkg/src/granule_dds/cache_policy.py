"""Usage-driven lifetime for cached transform outputs.

Each access contributes ``exp(-lambda_decay * age)`` to a frequency score
``f``; the cache lifetime is ``base * (1 + alpha * f)`` clamped to
``[min_lifetime_seconds, max_lifetime_seconds]``. Under pool pressure ``p``
an idle item is evictable once its idle time exceeds ``lifetime * (1 - p)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from granule_dds.errors import InvalidArgument, NonMonotonicTime


@dataclass(frozen=True)
class UsageState:
    content_key: str
    access_times: tuple = ()
    base_lifetime_seconds: float = 86400.0
    alpha: float = 1.0
    lambda_decay: float = 1.0 / 86400
    min_lifetime_seconds: float = 3600.0
    max_lifetime_seconds: float = 2592000.0

    def __post_init__(self):
        if not (self.min_lifetime_seconds <= self.base_lifetime_seconds
                <= self.max_lifetime_seconds):
            raise InvalidArgument("need min <= base <= max lifetime")
        if self.alpha < 0 or self.lambda_decay <= 0:
            raise InvalidArgument("alpha must be >= 0 and lambda_decay > 0")
        times = tuple(self.access_times)
        if any(b < a for a, b in zip(times, times[1:])):
            raise InvalidArgument("access_times must be sorted")
        object.__setattr__(self, "access_times", times)

    @property
    def last_access(self):
        return self.access_times[-1] if self.access_times else None


def record_access(state: UsageState, t: float) -> UsageState:
    if state.access_times and t < state.access_times[-1]:
        raise NonMonotonicTime(f"access at {t} precedes {state.access_times[-1]}")
    return replace(state, access_times=state.access_times + (t,))


def frequency_score(state: UsageState, now: float) -> float:
    return math.fsum(math.exp(-state.lambda_decay * (now - t)) for t in state.access_times)


def compute_lifetime(state: UsageState, now: float) -> float:
    f = frequency_score(state, now)
    lifetime = state.base_lifetime_seconds * (1.0 + state.alpha * f)
    return min(max(lifetime, state.min_lifetime_seconds), state.max_lifetime_seconds)


def should_evict(state: UsageState, now: float, pool_pressure: float) -> bool:
    if not 0.0 <= pool_pressure <= 1.0:
        raise InvalidArgument(f"pool_pressure must lie in [0, 1], got {pool_pressure}")
    last = state.last_access
    if last is None:
        return True
    return now - last > compute_lifetime(state, now) * (1.0 - pool_pressure)


@dataclass
class CachePolicy:
    """Policy constants, normally read from the ``cache.*`` config keys."""

    alpha: float = 1.0
    lambda_decay: float = 1.0 / 86400
    base_lifetime_seconds: float = 86400.0
    min_lifetime_seconds: float = 3600.0
    max_lifetime_seconds: float = 2592000.0
    _states: dict = field(default_factory=dict, repr=False)

    def state(self, content_key: str) -> UsageState:
        st = self._states.get(content_key)
        if st is None:
            st = UsageState(content_key, (), self.base_lifetime_seconds, self.alpha,
                            self.lambda_decay, self.min_lifetime_seconds,
                            self.max_lifetime_seconds)
            self._states[content_key] = st
        return st

    def touch(self, content_key: str, t: float) -> UsageState:
        st = record_access(self.state(content_key), t)
        self._states[content_key] = st
        return st

    def lifetime(self, content_key: str, now: float) -> float:
        return compute_lifetime(self.state(content_key), now)

    def evictable(self, now: float, pool_pressure: float) -> list[str]:
        return sorted(k for k, st in self._states.items()
                      if should_evict(st, now, pool_pressure))

    def forget(self, content_key: str) -> None:
        self._states.pop(content_key, None)
