from __future__ import annotations

import time
from dataclasses import dataclass, field

import pytest

import acceptance_log

from granule_dds.agents import AgentConfig, AgentKind, Conductor, Transformer, Transporter
from granule_dds.api import ApiService
from granule_dds.catalog import Catalog, CatalogConfig
from granule_dds.clock import SimClock
from granule_dds.model import MessageStatus, MessageType
from granule_dds.plugins import CallbackNotifier, default_registry
from granule_dds.plugins.sim_tape import GB, SimTape, SimTapeConfig


@pytest.fixture
def clock():
    return SimClock(0.0)


@pytest.fixture
def catalog(clock):
    cat = Catalog(CatalogConfig(), clock)
    yield cat
    cat.close()


@dataclass
class Stack:
    """Service pieces wired together on a simulated clock, with a recording
    consumer that never acks on its own."""

    clock: SimClock
    catalog: Catalog
    sim: SimTape
    api: ApiService
    transporter: Transporter
    transformer: Transformer
    conductor: Conductor
    received: list = field(default_factory=list)

    @property
    def agents(self):
        return [self.transporter, self.transformer, self.conductor]

    def submit(self, **doc) -> int:
        body = {"scope": self.sim.config.scope, "name": self.sim.config.name,
                "request_type": "stage_in", **doc}
        resp = self.api.handle_submit(body)
        assert resp.status == 201, resp.body
        return resp.body["request_id"]

    def ack_all_sent(self) -> int:
        sent = [m for m in self.catalog.messages(statuses=[MessageStatus.SENT])
                if m.msg_type is MessageType.CONTENT_AVAILABLE]
        for m in sent:
            assert self.api.handle_ack(m.msg_id).status == 200
        return len(sent)

    def finish_staging(self) -> None:
        while (t := self.sim.next_event_time()) is not None:
            self.clock.advance_to(t)
            self.sim.advance_to(t)


def make_stack(sim_config=None, batch_limit=50, notifier_factory=None) -> Stack:
    clock = SimClock(0.0)
    catalog = Catalog(CatalogConfig(), clock)
    sim = SimTape(sim_config or SimTapeConfig(file_count=3, file_size_bytes=GB), clock)
    registry = default_registry()
    api = ApiService(catalog, registry)
    received = []
    if notifier_factory is None:
        notifier = CallbackNotifier(catalog, lambda m, p: received.append((m, p)))
    else:
        notifier = notifier_factory(catalog, received)
    return Stack(
        clock, catalog, sim, api,
        Transporter(catalog, sim, AgentConfig(AgentKind.TRANSPORTER, "tp-1")),
        Transformer(catalog, registry, AgentConfig(AgentKind.TRANSFORMER, "tf-1")),
        Conductor(catalog, sim, notifier,
                  AgentConfig(AgentKind.CONDUCTOR, "cd-1", batch_limit=batch_limit)),
        received)


@pytest.fixture
def stack():
    return make_stack()


# -- acceptance summary ---------------------------------------------------------

_started = time.perf_counter()


def pytest_sessionfinish(session, exitstatus):
    if not acceptance_log.LINES:
        return
    elapsed = time.perf_counter() - _started
    budget = acceptance_log.SUITE_BUDGET_SECONDS
    ok = elapsed < budget
    acceptance_log.LINES.append(
        f"{'PASS' if ok else 'FAIL'}  suite runtime: {elapsed:.1f} s (budget < {budget:.0f} s)")
    if not ok and exitstatus == 0:
        session.exitstatus = 1


def pytest_terminal_summary(terminalreporter):
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
