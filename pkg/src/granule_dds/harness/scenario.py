"""Data-carousel scenarios on the simulated clock.

Fine mode drives the real service stack (REST submit, catalog, all three
agents, notifier) against the simulated tape, with an in-process consumer
that handles one content at a time and acks through the REST handler.
Coarse mode is today's baseline and runs on the simulator alone: stage
everything, then deliver everything, then release everything.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Optional

from granule_dds.agents import (
    AgentConfig, AgentKind, Conductor, Transformer, Transporter, drain,
)
from granule_dds.api import ApiService
from granule_dds.catalog import Catalog, CatalogConfig
from granule_dds.clock import SimClock
from granule_dds.errors import InvalidArgument, ScenarioFailed
from granule_dds.harness.report import Mode, SimReport
from granule_dds.model import Content, ContentStatus, MessageType, Relation
from granule_dds.plugins import CallbackNotifier, default_registry
from granule_dds.plugins.base import ReplicaState
from granule_dds.plugins.sim_tape import SimTape, SimTapeConfig


@dataclass
class ScenarioConfig:
    sim: SimTapeConfig = field(default_factory=SimTapeConfig)
    mode: Mode = Mode.FINE
    consumer_processing_seconds: float = 0.0
    consumer_ack_latency_seconds: float = 0.0
    transform_tag: str = "passthrough"
    chunk_size: Optional[int] = None
    batch_limit: int = 50

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if isinstance(self.sim, dict):
            self.sim = SimTapeConfig.from_dict(self.sim)
        if self.consumer_processing_seconds < 0 or self.consumer_ack_latency_seconds < 0:
            raise InvalidArgument("consumer timings must be non-negative")
        if self.transform_tag == "event_splitter" and not self.chunk_size:
            raise InvalidArgument("event_splitter scenarios need chunk_size")
        if self.transform_tag == "event_splitter" and self.sim.event_count_per_file < 2:
            # a one-event file is stored as range (0, 0), which reads as "count unknown"
            raise InvalidArgument("event_splitter scenarios need at least 2 events per file")
        if self.batch_limit < 1:
            raise InvalidArgument("batch_limit must be positive")

    def request_document(self) -> dict:
        doc = {"scope": self.sim.scope, "name": self.sim.name,
               "transform_tag": self.transform_tag}
        if self.transform_tag == "passthrough":
            doc["request_type"] = "stage_in"
        elif self.transform_tag == "event_splitter":
            doc.update(request_type="event_stream", chunk_size=self.chunk_size)
        else:
            doc["request_type"] = "transform"
        return doc

    def transform_params(self) -> dict:
        return {"chunk_size": self.chunk_size} if self.chunk_size else {}


class SimConsumer:
    """Single-worker consumer on the simulated clock.

    Contents of each new message are processed back to back after whatever
    the worker is already busy with; the message is acked ``ack_latency``
    seconds after its last content is done. Repeated dedup keys are dropped.
    """

    def __init__(self, clock, processing_seconds, ack_latency_seconds, ack):
        self.clock = clock
        self.processing = processing_seconds
        self.ack_latency = ack_latency_seconds
        self.ack = ack
        self.seen: set[str] = set()
        self.busy_until = 0.0
        self.first_delivery: Optional[float] = None
        self.duplicates = 0
        self._pending: list = []
        self._seq = 0

    def on_message(self, message, payload):
        if message.msg_type is not MessageType.CONTENT_AVAILABLE:
            return
        now = self.clock.now()
        if self.first_delivery is None:
            self.first_delivery = now
        if message.dedup_key in self.seen:
            self.duplicates += 1
            return
        self.seen.add(message.dedup_key)
        t = max(now, self.busy_until)
        for _ in payload["contents"]:
            t = t + self.processing
        self.busy_until = t
        self._seq += 1
        heapq.heappush(self._pending, (t + self.ack_latency, self._seq, message.msg_id))

    def next_event_time(self) -> Optional[float]:
        return self._pending[0][0] if self._pending else None

    def advance_to(self, t: float) -> None:
        while self._pending and self._pending[0][0] <= t:
            _, _, msg_id = heapq.heappop(self._pending)
            resp = self.ack(msg_id)
            if resp.status != 200:
                raise ScenarioFailed(f"ack of message {msg_id} refused: {resp.body}")


@dataclass
class FineRun:
    """A finished fine-mode run with the live objects kept for inspection."""

    report: SimReport
    catalog: Catalog
    request_id: int
    sim: SimTape
    consumer: SimConsumer


def run_scenario(config: ScenarioConfig) -> SimReport:
    if config.mode is Mode.FINE:
        return run_fine(config).report
    return _run_coarse(config)


def run_fine(config: ScenarioConfig) -> FineRun:
    clock = SimClock(0.0)
    sim = SimTape(config.sim, clock)
    catalog = Catalog(CatalogConfig(), clock)
    registry = default_registry()
    api = ApiService(catalog, registry)
    consumer = SimConsumer(clock, config.consumer_processing_seconds,
                           config.consumer_ack_latency_seconds, api.handle_ack)
    notifier = CallbackNotifier(catalog, consumer.on_message)
    agents = [
        Transporter(catalog, sim, AgentConfig(AgentKind.TRANSPORTER, "transporter-sim")),
        Transformer(catalog, registry, AgentConfig(AgentKind.TRANSFORMER, "transformer-sim")),
        Conductor(catalog, sim, notifier, AgentConfig(
            AgentKind.CONDUCTOR, "conductor-sim", batch_limit=config.batch_limit)),
    ]
    resp = api.handle_submit(config.request_document())
    if resp.status != 201:
        raise ScenarioFailed(f"submit refused: {resp.body}")
    rid = resp.body["request_id"]

    released = 0
    while True:
        released += sum(o.released_bytes for o in drain(agents))
        if catalog.get_request(rid).status.terminal:
            break
        upcoming = [t for t in (sim.next_event_time(), consumer.next_event_time())
                    if t is not None]
        if not upcoming:
            raise ScenarioFailed(f"request {rid} stalled at t={clock.now()}")
        t = min(upcoming)
        clock.advance_to(t)
        sim.advance_to(t)
        consumer.advance_to(t)
    makespan = clock.now()

    histories = catalog.all_histories()
    inputs = {c.content_id: c for c in catalog.contents_of(
        catalog.collection_of(rid, Relation.INPUT).collection_id)}
    outputs = catalog.contents_of(catalog.collection_of(rid, Relation.OUTPUT).collection_id)
    outputs.sort(key=lambda c: (inputs[c.parent_content_id].name, c.min_id))

    def first_at(content_id, status):
        for s, at in histories[content_id]:
            if s is status:
                return at
        raise ScenarioFailed(f"content {content_id} never reached {status.value}")

    latency = [first_at(c.content_id, ContentStatus.DELIVERED)
               - first_at(c.parent_content_id, ContentStatus.AVAILABLE) for c in outputs]
    report = SimReport(
        peak_pool_bytes=sim.stats.peak_pool_bytes,
        makespan_seconds=makespan,
        time_to_first_delivery_seconds=consumer.first_delivery,
        per_content_latency=latency,
        total_released_bytes=released,
        mode=Mode.FINE, seed=config.sim.seed)
    return FineRun(report, catalog, rid, sim, consumer)


def _run_coarse(config: ScenarioConfig) -> SimReport:
    clock = SimClock(0.0)
    sim = SimTape(config.sim, clock)
    replicas = sim.list_files(config.sim.scope, config.sim.name)
    for r in replicas:
        sim.stage_in(r)
    while any(r.state is not ReplicaState.ON_DISK
              for r in (sim.poll_state(r) for r in replicas)):
        t = sim.next_event_time()
        if t is None:
            raise ScenarioFailed("pool too small to hold the whole dataset in coarse mode")
        clock.advance_to(t)
        sim.advance_to(t)
    all_staged = clock.now()
    staged_at = {idx: t for t, kind, idx in sim.stats.trace if kind == "staged"}

    plugin = default_registry().transform(config.transform_tag)
    params = config.transform_params()
    outputs = []
    for i, r in enumerate(replicas):
        source = Content(scope=r.scope, name=r.name, min_id=0,
                         max_id=(r.event_count or 1) - 1, size_bytes=r.size_bytes,
                         checksum=r.checksum, locator=r.locator, content_id=i)
        outputs += plugin.transform(source, params)

    latency = []
    t = all_staged
    for start in range(0, len(outputs), config.batch_limit):
        batch = outputs[start:start + config.batch_limit]
        for _ in batch:
            t = t + config.consumer_processing_seconds
        acked = t + config.consumer_ack_latency_seconds
        latency += [acked - staged_at[c.parent_content_id] for c in batch]
    done = acked
    clock.advance_to(done)
    for r in replicas:
        sim.release(sim.poll_state(r))
    return SimReport(
        peak_pool_bytes=sim.stats.peak_pool_bytes,
        makespan_seconds=done,
        time_to_first_delivery_seconds=all_staged,
        per_content_latency=latency,
        total_released_bytes=sim.stats.released_bytes,
        mode=Mode.COARSE, seed=config.sim.seed)
