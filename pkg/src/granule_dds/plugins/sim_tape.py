"""Deterministic tape-backed storage with a bounded disk staging pool.

The simulator models one dataset of ``file_count`` files living on tape.
Stage-in requests join a FIFO queue; a queued file starts staging when a
staging slot is free and its bytes fit in the pool next to everything
already staged or staging. A file occupies the pool from staging completion
until it is released. Staging of file ``i`` takes
``staging_seconds_base + jitter_i`` with ``jitter_i`` uniform on
``[0, staging_seconds_jitter]``, drawn from a generator seeded with
``(seed, i)`` so that durations do not depend on call order.

Time comes from the clock handed in: with a :class:`SimClock` a driver
moves time and calls :meth:`SimTape.advance_to`; with a wall clock every
call catches up with real time first.
"""

from __future__ import annotations

import heapq
import json
import threading
import zlib
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from granule_dds.clock import SimClock, WallClock
from granule_dds.errors import IllegalState, InvalidArgument, UnknownDataset
from granule_dds.plugins.base import DDMPlugin, Replica, ReplicaState

GB = 1_000_000_000


@dataclass
class SimTapeConfig:
    seed: int = 0
    file_count: int = 10
    file_size_bytes: Union[int, list] = GB
    event_count_per_file: int = 1000
    staging_slots: int = 2
    staging_seconds_base: float = 10.0
    staging_seconds_jitter: float = 0.0
    disk_pool_capacity_bytes: int = 100 * GB
    clock: str = "simulated"
    scope: str = "sim"
    name: str = "carousel"

    def __post_init__(self):
        if self.file_count < 1:
            raise InvalidArgument("file_count must be positive")
        sizes = self.sizes()
        if len(sizes) != self.file_count or min(sizes) < 1:
            raise InvalidArgument("need one positive size per file")
        if self.event_count_per_file < 1 or self.staging_slots < 1:
            raise InvalidArgument("event_count_per_file and staging_slots must be positive")
        if self.staging_seconds_base <= 0 or self.staging_seconds_jitter < 0:
            raise InvalidArgument("staging time base must be > 0 and jitter >= 0")
        if self.disk_pool_capacity_bytes < max(sizes):
            raise InvalidArgument("pool capacity smaller than the largest file")
        if self.clock not in ("simulated", "wall"):
            raise InvalidArgument(f"clock must be 'simulated' or 'wall', not {self.clock!r}")
        if self.seed < 0:
            raise InvalidArgument("seed must be non-negative")

    def sizes(self) -> list[int]:
        if isinstance(self.file_size_bytes, (list, tuple)):
            return [int(s) for s in self.file_size_bytes]
        return [int(self.file_size_bytes)] * self.file_count

    def file_name(self, index: int) -> str:
        return f"file_{index:06d}.root"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SimTapeConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgument(f"unknown sim config keys {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "SimTapeConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def staging_jitter(seed: int, index: int, jitter: float) -> float:
    if jitter == 0:
        return 0.0
    return float(np.random.default_rng([seed, index]).uniform(0.0, jitter))


def adler32_hex(data: bytes) -> str:
    return f"{zlib.adler32(data) & 0xffffffff:08x}"


@dataclass
class _File:
    index: int
    replica: Replica
    duration: float
    done_at: Optional[float] = None


@dataclass
class PoolStats:
    ondisk_bytes: int = 0
    committed_bytes: int = 0
    peak_pool_bytes: int = 0
    peak_staging: int = 0
    released_bytes: int = 0
    trace: list = field(default_factory=list)


class SimTape(DDMPlugin):
    def __init__(self, config: SimTapeConfig, clock=None):
        self.config = config
        if clock is None:
            clock = SimClock() if config.clock == "simulated" else WallClock()
        self.clock = clock
        self._lock = threading.RLock()
        self._files: dict[str, _File] = {}
        for i, size in enumerate(config.sizes()):
            name = config.file_name(i)
            replica = Replica(
                scope=config.scope, name=name, state=ReplicaState.TAPE_ONLY,
                size_bytes=size, event_count=config.event_count_per_file,
                locator=f"sim://{config.scope}/{config.name}/{name}",
                checksum=adler32_hex(f"{config.scope}:{name}".encode()))
            duration = config.staging_seconds_base + staging_jitter(
                config.seed, i, config.staging_seconds_jitter)
            self._files[name] = _File(i, replica, duration)
        self._queue: deque[str] = deque()
        self._active: list[tuple[float, int, str]] = []
        self._now = clock.now()
        self.stats = PoolStats()

    # -- event machinery ------------------------------------------------------

    def _event(self, t, kind, name):
        self.stats.trace.append((t, kind, self._files[name].index))

    def _check_invariants(self):
        c, s = self.config, self.stats
        assert s.ondisk_bytes <= s.committed_bytes <= c.disk_pool_capacity_bytes
        assert len(self._active) <= c.staging_slots

    def _set_state(self, f: _File, state: ReplicaState):
        f.replica = f.replica.with_state(state)

    def _dispatch(self, t: float):
        c, s = self.config, self.stats
        while self._queue and len(self._active) < c.staging_slots:
            f = self._files[self._queue[0]]
            if s.committed_bytes + f.replica.size_bytes > c.disk_pool_capacity_bytes:
                break
            self._queue.popleft()
            s.committed_bytes += f.replica.size_bytes
            f.done_at = t + f.duration
            heapq.heappush(self._active, (f.done_at, f.index, f.replica.name))
            s.peak_staging = max(s.peak_staging, len(self._active))
            self._event(t, "stage_started", f.replica.name)
        self._check_invariants()

    def advance_to(self, t: float) -> None:
        """Complete every stage-in due at or before ``t``, in time order."""
        with self._lock:
            if t < self._now:
                return
            s = self.stats
            while self._active and self._active[0][0] <= t:
                done_at = self._active[0][0]
                while self._active and self._active[0][0] == done_at:
                    _, _, name = heapq.heappop(self._active)
                    f = self._files[name]
                    self._set_state(f, ReplicaState.ON_DISK)
                    s.ondisk_bytes += f.replica.size_bytes
                    s.peak_pool_bytes = max(s.peak_pool_bytes, s.ondisk_bytes)
                    self._event(done_at, "staged", name)
                self._dispatch(done_at)
            self._now = t

    def next_event_time(self) -> Optional[float]:
        with self._lock:
            return self._active[0][0] if self._active else None

    def _sync(self):
        self.advance_to(self.clock.now())

    def _file(self, replica: Replica) -> _File:
        f = self._files.get(replica.name)
        if f is None or replica.scope != self.config.scope:
            raise UnknownDataset(f"{replica.scope}:{replica.name}")
        return f

    # -- DDM interface --------------------------------------------------------

    def list_files(self, scope, name):
        with self._lock:
            if (scope, name) != (self.config.scope, self.config.name):
                raise UnknownDataset(f"{scope}:{name}")
            self._sync()
            return [f.replica for f in sorted(self._files.values(), key=lambda f: f.index)]

    def stage_in(self, replica):
        with self._lock:
            self._sync()
            f = self._file(replica)
            if f.replica.state is not ReplicaState.TAPE_ONLY:
                raise IllegalState(f"{replica.name} is {f.replica.state.value}, not tape_only")
            self._set_state(f, ReplicaState.STAGING)
            self._queue.append(f.replica.name)
            self._event(self._now, "stage_requested", f.replica.name)
            self._dispatch(self._now)

    def poll_state(self, replica):
        with self._lock:
            self._sync()
            return self._file(replica).replica

    def release(self, replica):
        """Drop the disk copy; the file goes back to tape-only."""
        with self._lock:
            self._sync()
            f = self._file(replica)
            if f.replica.state is not ReplicaState.ON_DISK:
                raise IllegalState(f"{replica.name} is {f.replica.state.value}, not on_disk")
            s = self.stats
            self._set_state(f, ReplicaState.TAPE_ONLY)
            s.ondisk_bytes -= f.replica.size_bytes
            s.committed_bytes -= f.replica.size_bytes
            s.released_bytes += f.replica.size_bytes
            self._event(self._now, "released", f.replica.name)
            self._dispatch(self._now)

    @property
    def pool_bytes(self) -> int:
        return self.stats.ondisk_bytes

    @property
    def staging_count(self) -> int:
        return len(self._active)
