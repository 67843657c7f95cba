"""The daemon agents: Transporter, Transformer and Conductor.

Each agent runs claim / process / persist cycles against the catalog and
keeps no state of its own between cycles, so any number of instances (or a
restarted one) can pick up where another stopped.
"""

from __future__ import annotations

import enum
import json
import logging
import threading
import uuid
from dataclasses import asdict, dataclass
from typing import Optional

from granule_dds.catalog import Catalog, ItemKind
from granule_dds.errors import DDMError, IllegalState, NotifyError, StorageError
from granule_dds.model import (
    CollectionStatus, Content, ContentEvent, ContentStatus, Message, MessageStatus,
    MessageType, Relation, RequestEvent, RequestStatus, TransformStatus,
    derive_request_event,
)
from granule_dds.plugins.base import Replica, ReplicaState

logger = logging.getLogger(__name__)

DDM_ATTEMPTS = 3


class AgentKind(str, enum.Enum):
    TRANSPORTER = "transporter"
    TRANSFORMER = "transformer"
    CONDUCTOR = "conductor"


@dataclass
class AgentConfig:
    kind: AgentKind
    agent_id: str = ""
    poll_interval_seconds: float = 1.0
    batch_limit: int = 50
    lease_seconds: Optional[int] = None

    def __post_init__(self):
        self.kind = AgentKind(self.kind)
        if not self.agent_id:
            self.agent_id = f"{self.kind.value}-{uuid.uuid4().hex[:8]}"
        if self.poll_interval_seconds <= 0 or self.batch_limit < 1:
            raise ValueError("poll interval and batch limit must be positive")


@dataclass
class CycleOutcome:
    claimed: int = 0
    progressed: int = 0
    failed: int = 0
    released_bytes: int = 0

    @property
    def idle(self) -> bool:
        return self.progressed == 0


def replica_of(content: Content, state=ReplicaState.STAGING) -> Replica:
    return Replica(scope=content.scope, name=content.name, state=state,
                   size_bytes=content.size_bytes, locator=content.locator,
                   checksum=content.checksum)


def content_payload(content: Content) -> dict:
    return {
        "content_id": content.content_id, "scope": content.scope, "name": content.name,
        "min_id": content.min_id, "max_id": content.max_id,
        "size_bytes": content.size_bytes, "checksum": content.checksum,
        "locator": content.locator,
    }


def _with_retries(fn, *args):
    for attempt in range(1, DDM_ATTEMPTS + 1):
        try:
            return fn(*args)
        except DDMError:
            if attempt == DDM_ATTEMPTS:
                raise
            logger.warning("ddm call %s failed (attempt %d)", fn.__name__, attempt)


class Agent:
    kind: AgentKind
    item_kind: ItemKind
    eligible: tuple

    def __init__(self, catalog: Catalog, config: Optional[AgentConfig] = None):
        self.catalog = catalog
        self.config = config or AgentConfig(kind=self.kind)

    def cycle(self) -> CycleOutcome:
        """Claim a batch of work, process it and release the claims."""
        out = CycleOutcome()
        cfg = self.config
        items = self.catalog.claim_work(self.item_kind, self.eligible, cfg.batch_limit,
                                        cfg.agent_id, cfg.lease_seconds)
        out.claimed = len(items)
        for item in items:
            try:
                self.process(item, out)
            except (StorageError, DDMError, IllegalState, NotifyError):
                logger.exception("%s failed on %r", cfg.agent_id, item)
                out.failed += 1
        self.catalog.release_claims(cfg.agent_id, self.item_kind)
        if logger.isEnabledFor(logging.INFO):
            logger.info(json.dumps({"agent": cfg.agent_id, "kind": self.kind.value,
                                    **asdict(out)}))
        return out

    def process(self, item, out: CycleOutcome) -> None:
        raise NotImplementedError


class Transporter(Agent):
    """Resolves input replicas, issues stage-ins and watches them land."""

    kind = AgentKind.TRANSPORTER
    item_kind = ItemKind.REQUEST
    eligible = (RequestStatus.NEW, RequestStatus.IN_PROGRESS)

    def __init__(self, catalog, ddm, config=None):
        super().__init__(catalog, config)
        self.ddm = ddm

    def process(self, req, out):
        if req.status is RequestStatus.NEW:
            self._resolve(req, out)
        else:
            self._poll(req, out)

    def _resolve(self, req, out):
        cat = self.catalog
        inp = cat.collection_of(req.request_id, Relation.INPUT)
        try:
            replicas = _with_retries(self.ddm.list_files, req.scope, req.name)
        except Exception as exc:
            logger.error("request %s: cannot resolve %s:%s: %s",
                         req.request_id, req.scope, req.name, exc)
            with cat.transaction():
                cat.close_collection(inp.collection_id)
                cat.close_collection(cat.collection_of(req.request_id,
                                                       Relation.OUTPUT).collection_id)
                cat.apply_request_event(req.request_id, RequestEvent.CLAIM)
                cat.apply_request_event(req.request_id, RequestEvent.ALL_FAILED)
            out.failed += 1
            return
        if inp.status is CollectionStatus.OPEN:
            cat.bulk_upsert_contents(inp.collection_id, [
                Content(scope=r.scope, name=r.name, min_id=0,
                        max_id=r.event_count - 1 if r.event_count else 0,
                        size_bytes=r.size_bytes, checksum=r.checksum, locator=r.locator)
                for r in replicas])
        by_name = {r.name: r for r in replicas}
        on_disk, staging, failed = [], [], []
        for c in cat.contents_of(inp.collection_id, [ContentStatus.NEW]):
            r = by_name.get(c.name)
            if r is None:
                failed.append(c.content_id)
            elif r.state is ReplicaState.ON_DISK:
                on_disk.append(c.content_id)
            elif r.state is ReplicaState.STAGING:
                staging.append(c.content_id)
            else:
                try:
                    _with_retries(self.ddm.stage_in, r)
                    staging.append(c.content_id)
                except (DDMError, IllegalState) as exc:
                    logger.error("stage-in of %s failed: %s", c.name, exc)
                    failed.append(c.content_id)
        with cat.transaction():
            cat.transition_contents(on_disk, ContentEvent.ALREADY_ON_DISK)
            cat.transition_contents(staging, ContentEvent.STAGE_REQUESTED)
            cat.transition_contents(failed, ContentEvent.FAIL)
            cat.close_collection(inp.collection_id)
            cat.apply_request_event(req.request_id, RequestEvent.CLAIM)
        out.progressed += 1 + len(on_disk) + len(staging)
        out.failed += len(failed)

    def _poll(self, req, out):
        cat = self.catalog
        inp = cat.collection_of(req.request_id, Relation.INPUT)
        staged, failed = [], []
        for c in cat.contents_of(inp.collection_id, [ContentStatus.STAGING]):
            try:
                r = _with_retries(self.ddm.poll_state, replica_of(c))
                if r.state is ReplicaState.TAPE_ONLY:
                    _with_retries(self.ddm.stage_in, r)
                elif r.state is ReplicaState.ON_DISK:
                    staged.append(c.content_id)
            except (DDMError, IllegalState) as exc:
                logger.error("polling %s failed: %s", c.name, exc)
                failed.append(c.content_id)
        if not staged and not failed:
            return
        with cat.transaction():
            cat.transition_contents(staged, ContentEvent.STAGED)
            cat.transition_contents(failed, ContentEvent.FAIL)
        out.progressed += len(staged)
        out.failed += len(failed)


class Transformer(Agent):
    """Runs the request's transform plugin over every staged input."""

    kind = AgentKind.TRANSFORMER
    item_kind = ItemKind.TRANSFORM
    eligible = (TransformStatus.NEW, TransformStatus.RUNNING)

    def __init__(self, catalog, registry, config=None):
        super().__init__(catalog, config)
        self.registry = registry

    def process(self, tf, out):
        cat = self.catalog
        req = cat.get_request(tf.request_id)
        if req.status is not RequestStatus.IN_PROGRESS:
            return
        plugin = self.registry.transform(tf.transform_tag)
        params = dict(req.metadata.get("transform_params", {}))
        if req.chunk_size is not None:
            params.setdefault("chunk_size", req.chunk_size)
        out_col = cat.collection_of(req.request_id, Relation.OUTPUT)
        retries = tf.retries
        for inp in cat.unconsumed_inputs(req.request_id):
            if inp.status is ContentStatus.FAILED:
                outputs = [_failed_output(inp)]
            else:
                outputs = None
                for attempt in range(tf.max_retries + 1):
                    try:
                        outputs = plugin.transform(inp, params)
                        break
                    except Exception as exc:
                        retries = max(retries, min(attempt + 1, tf.max_retries))
                        logger.warning("transform %s of %s failed (attempt %d): %s",
                                       tf.transform_tag, inp.name, attempt + 1, exc)
                if outputs is None:
                    outputs = [_failed_output(inp)]
                    out.failed += 1
            cat.bulk_upsert_contents(out_col.collection_id, outputs)
            out.progressed += 1

        changes = {}
        if retries != tf.retries:
            changes["retries"] = retries
        if self._finished_inputs(req.request_id) and out_col.status is CollectionStatus.OPEN:
            outputs = cat.contents_of(out_col.collection_id)
            all_failed = bool(outputs) and all(
                c.status is ContentStatus.FAILED for c in outputs)
            changes["status"] = TransformStatus.FAILED if all_failed else TransformStatus.FINISHED
            with cat.transaction():
                cat.close_collection(out_col.collection_id)
                cat.update_with_version("transform", tf.transform_id, tf.version, changes)
            out.progressed += 1
        elif out.progressed and tf.status is TransformStatus.NEW:
            changes["status"] = TransformStatus.RUNNING
            cat.update_with_version("transform", tf.transform_id, tf.version, changes)
        elif changes:
            cat.update_with_version("transform", tf.transform_id, tf.version, changes)

    def _finished_inputs(self, request_id) -> bool:
        """Input list is final and every input has been consumed or failed."""
        cat = self.catalog
        inp = cat.collection_of(request_id, Relation.INPUT)
        if inp.status is not CollectionStatus.CLOSED:
            return False
        pending = cat.contents_of(inp.collection_id, [ContentStatus.NEW, ContentStatus.STAGING])
        return not pending and not cat.unconsumed_inputs(request_id)


def _failed_output(inp: Content) -> Content:
    return Content(scope=inp.scope, name=inp.name, min_id=inp.min_id, max_id=inp.max_id,
                   status=ContentStatus.FAILED, size_bytes=inp.size_bytes,
                   checksum=inp.checksum, locator=inp.locator,
                   parent_content_id=inp.content_id)


class Conductor(Agent):
    """Notifies consumers, turns acks into deliveries and releases inputs."""

    kind = AgentKind.CONDUCTOR
    item_kind = ItemKind.MESSAGE_BATCH
    eligible = (RequestStatus.IN_PROGRESS,)

    def __init__(self, catalog, ddm, notifier, config=None):
        super().__init__(catalog, config)
        self.ddm = ddm
        self.notifier = notifier

    def process(self, req, out):
        cat = self.catalog
        rid = req.request_id
        for msg in cat.messages(rid, statuses=[MessageStatus.NEW]):
            self._send(msg, out)
        cols = {c.relation: c for c in cat.get_collections(rid)}
        inp_col, out_col = cols[Relation.INPUT], cols[Relation.OUTPUT]
        self._notify(rid, out_col, out)
        self._collect_acks(rid, inp_col, out)
        self._release(inp_col, out)
        self._finish(rid, inp_col, out_col, out)

    def _send(self, msg: Message, out):
        payload = {"contents": [content_payload(c)
                                for c in self.catalog.get_contents(msg.content_ids)]}
        try:
            self.notifier.send(msg, payload)
        except (NotifyError, OSError) as exc:
            logger.warning("sending message %s failed: %s", msg.msg_id, exc)
            out.failed += 1
            return
        self.catalog.mark_message(msg.msg_id, MessageStatus.SENT)
        out.progressed += 1

    def _record_and_send(self, message: Message, out, apply=None):
        cat = self.catalog
        if cat.find_message(message.dedup_key) is not None:
            return  # recorded earlier; unsent ones go out at the top of process
        with cat.transaction():
            msg_id = cat.record_message(message)
            if apply is not None:
                apply()
        msg = cat.get_message(msg_id)
        if msg.status is MessageStatus.NEW:
            self._send(msg, out)

    def _notify(self, rid, out_col, out):
        cat = self.catalog
        available = cat.contents_of(out_col.collection_id, [ContentStatus.AVAILABLE])
        limit = self.config.batch_limit
        for start in range(0, len(available), limit):
            chunk = available[start:start + limit]
            ids = [c.content_id for c in chunk]
            parent_ids = sorted({c.parent_content_id for c in chunk})
            parents = [p.content_id for p in cat.get_contents(parent_ids)
                       if p.status is ContentStatus.AVAILABLE]

            def apply(ids=ids, parents=parents):
                cat.transition_contents(ids, ContentEvent.NOTIFY_SENT)
                cat.transition_contents(parents, ContentEvent.NOTIFY_SENT)

            self._record_and_send(Message(
                request_id=rid, msg_type=MessageType.CONTENT_AVAILABLE,
                dedup_key=f"{rid}:" + ",".join(str(i) for i in sorted(ids)),
                content_ids=ids, created_at=cat.clock.now()), out, apply)

    def _collect_acks(self, rid, inp_col, out):
        cat = self.catalog
        acked = []
        for msg_id in self.notifier.poll_acks(rid):
            msg = cat.get_message(msg_id)
            acked += [c.content_id for c in cat.get_contents(msg.content_ids)
                      if c.status is ContentStatus.DELIVERING]
        delivering = cat.contents_of(inp_col.collection_id, [ContentStatus.DELIVERING])
        if not acked and not delivering:
            return
        with cat.transaction():
            cat.transition_contents(acked, ContentEvent.ACKED)
            children = cat.children_of([c.content_id for c in delivering])
            done = [pid for pid, kids in children.items()
                    if kids and all(k.status in (ContentStatus.DELIVERED, ContentStatus.FAILED)
                                    for k in kids)]
            cat.transition_contents(done, ContentEvent.ACKED)
        out.progressed += len(acked) + len(done)

    def _release(self, inp_col, out):
        cat = self.catalog
        for c in cat.contents_of(inp_col.collection_id, [ContentStatus.DELIVERED]):
            replica = replica_of(c, ReplicaState.ON_DISK)
            try:
                try:
                    _with_retries(self.ddm.release, replica)
                except IllegalState:
                    # released before a crash kept us from recording it
                    state = _with_retries(self.ddm.poll_state, replica).state
                    if state is ReplicaState.ON_DISK:
                        raise
            except (DDMError, IllegalState) as exc:
                logger.warning("release of %s failed, will retry: %s", c.name, exc)
                out.failed += 1
                continue
            cat.transition_contents([c.content_id], ContentEvent.RELEASE_INPUT)
            out.released_bytes += c.size_bytes
            out.progressed += 1

    def _finish(self, rid, inp_col, out_col, out):
        cat = self.catalog
        if out_col.status is not CollectionStatus.CLOSED:
            return
        self._record_and_send(Message(
            request_id=rid, msg_type=MessageType.COLLECTION_CLOSED,
            dedup_key=f"{rid}:collection_closed:{out_col.collection_id}",
            created_at=cat.clock.now()), out)
        if cat.contents_of(inp_col.collection_id, [ContentStatus.DELIVERED]):
            return
        statuses = [c.status for c in cat.contents_of(out_col.collection_id)]
        event = derive_request_event(statuses, True)
        if event is None:
            return
        with cat.transaction():
            cat.apply_request_event(rid, event)
            msg_id = cat.record_message(Message(
                request_id=rid, msg_type=MessageType.REQUEST_FINISHED,
                dedup_key=f"{rid}:request_finished", created_at=cat.clock.now()))
        out.progressed += 1
        self._send(cat.get_message(msg_id), out)


def drain(agents, max_rounds: int = 10_000) -> list[CycleOutcome]:
    """Run the agents in pipeline order until a full round changes nothing."""
    outcomes = []
    for _ in range(max_rounds):
        busy = False
        for agent in agents:
            while True:
                outcome = agent.cycle()
                outcomes.append(outcome)
                if outcome.idle:
                    break
                busy = True
        if not busy:
            return outcomes
    raise RuntimeError("agents did not quiesce")


def run_daemon(agent: Agent, stop: threading.Event) -> None:
    """Cycle, heartbeat and sleep until ``stop`` is set.

    Errors from a cycle are logged and never end the loop; a stop request
    lets the in-flight cycle finish.
    """
    cfg = agent.config
    while not stop.is_set():
        try:
            agent.cycle()
        except Exception:
            logger.exception("%s cycle crashed", cfg.agent_id)
        try:
            agent.catalog.heartbeat(cfg.kind.value, cfg.agent_id)
        except StorageError:
            logger.exception("%s could not record heartbeat", cfg.agent_id)
        stop.wait(cfg.poll_interval_seconds)
