"""Reference discrete-event model of a carousel scenario.

Written against the scenario semantics only (no catalog, agents, plugins or
simulator classes) so that it can check :func:`run_scenario` end to end.
Events live in one heap keyed by ``(time, sequence)``; all events due at the
same instant are applied before the reactions they trigger.
"""

from __future__ import annotations

import heapq
from collections import deque

import numpy as np

from granule_dds.errors import ScenarioFailed
from granule_dds.harness.report import Mode, SimReport

_STAGED, _ACKED = 0, 1


def _durations(sim):
    out = []
    for i in range(sim.file_count):
        jitter = 0.0
        if sim.staging_seconds_jitter != 0:
            jitter = float(np.random.default_rng([sim.seed, i]).uniform(
                0.0, sim.staging_seconds_jitter))
        out.append(sim.staging_seconds_base + jitter)
    return out


def _sizes(sim):
    if isinstance(sim.file_size_bytes, (list, tuple)):
        return [int(s) for s in sim.file_size_bytes]
    return [int(sim.file_size_bytes)] * sim.file_count


def _output_counts(config):
    """Number of deliverable contents each file turns into."""
    if config.transform_tag == "event_splitter":
        n, k = config.sim.event_count_per_file, config.chunk_size
        return [-(-n // k)] * config.sim.file_count
    return [1] * config.sim.file_count


class _Stager:
    def __init__(self, sim):
        self.sizes = _sizes(sim)
        self.durations = _durations(sim)
        self.slots = sim.staging_slots
        self.capacity = sim.disk_pool_capacity_bytes
        self.waiting = deque(range(sim.file_count))
        self.active = 0
        self.committed = 0
        self.on_disk = 0
        self.peak = 0

    def start_what_fits(self, t, push):
        while (self.waiting and self.active < self.slots
               and self.committed + self.sizes[self.waiting[0]] <= self.capacity):
            i = self.waiting.popleft()
            self.active += 1
            self.committed += self.sizes[i]
            push(t + self.durations[i], _STAGED, i)

    def landed(self, i):
        self.active -= 1
        self.on_disk += self.sizes[i]
        self.peak = max(self.peak, self.on_disk)

    def freed(self, i):
        self.on_disk -= self.sizes[i]
        self.committed -= self.sizes[i]


def oracle_simulate(config) -> SimReport:
    if config.mode is Mode.FINE:
        return _fine(config)
    return _coarse(config)


def _fine(config) -> SimReport:
    heap, seq = [], [0]

    def push(t, kind, data):
        seq[0] += 1
        heapq.heappush(heap, (t, seq[0], kind, data))

    stager = _Stager(config.sim)
    counts = _output_counts(config)
    p, a = config.consumer_processing_seconds, config.consumer_ack_latency_seconds
    stager.start_what_fits(0.0, push)

    staged_at, delivered_at = {}, {}
    undelivered = list(counts)
    busy, first_delivery, released, t = 0.0, None, 0, 0.0
    remaining = sum(counts)
    while remaining:
        if not heap:
            raise ScenarioFailed("oracle: nothing left to happen")
        t = heap[0][0]
        landed, acked = [], []
        while heap and heap[0][0] == t:
            _, _, kind, data = heapq.heappop(heap)
            if kind == _STAGED:
                stager.landed(data)
                staged_at[data] = t
                landed.append(data)
            else:
                acked.append(data)
        if landed:
            stager.start_what_fits(t, push)
        # new outputs, file order then range order, cut into messages
        fresh = [(i, k) for i in sorted(landed) for k in range(counts[i])]
        for start in range(0, len(fresh), config.batch_limit):
            batch = fresh[start:start + config.batch_limit]
            if first_delivery is None:
                first_delivery = t
            done = max(t, busy)
            for _ in batch:
                done = done + p
            busy = done
            push(done + a, _ACKED, batch)
        for batch in acked:
            for i, k in batch:
                delivered_at[(i, k)] = t
                undelivered[i] -= 1
                remaining -= 1
                if undelivered[i] == 0:
                    stager.freed(i)
                    released += stager.sizes[i]
                    stager.start_what_fits(t, push)

    latency = [delivered_at[(i, k)] - staged_at[i]
               for i in range(len(counts)) for k in range(counts[i])]
    return SimReport(
        peak_pool_bytes=stager.peak, makespan_seconds=t,
        time_to_first_delivery_seconds=first_delivery, per_content_latency=latency,
        total_released_bytes=released, mode=Mode.FINE, seed=config.sim.seed)


def _coarse(config) -> SimReport:
    heap, seq = [], [0]

    def push(t, kind, data):
        seq[0] += 1
        heapq.heappush(heap, (t, seq[0], kind, data))

    stager = _Stager(config.sim)
    stager.start_what_fits(0.0, push)
    staged_at = {}
    while heap:
        t, _, _, i = heapq.heappop(heap)
        stager.landed(i)
        staged_at[i] = t
        stager.start_what_fits(t, push)
    if len(staged_at) != config.sim.file_count:
        raise ScenarioFailed("oracle: pool cannot hold the whole dataset")
    all_staged = max(staged_at.values())

    counts = _output_counts(config)
    items = [(i, k) for i in range(len(counts)) for k in range(counts[i])]
    t, latency = all_staged, []
    for start in range(0, len(items), config.batch_limit):
        batch = items[start:start + config.batch_limit]
        for _ in batch:
            t = t + config.consumer_processing_seconds
        acked = t + config.consumer_ack_latency_seconds
        latency += [acked - staged_at[i] for i, _ in batch]
    return SimReport(
        peak_pool_bytes=stager.peak, makespan_seconds=acked,
        time_to_first_delivery_seconds=all_staged, per_content_latency=latency,
        total_released_bytes=sum(stager.sizes), mode=Mode.COARSE, seed=config.sim.seed)
