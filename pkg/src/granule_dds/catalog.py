"""Durable catalog of requests, collections, contents, transforms and messages.

The catalog is the single serialization point of the service. It is backed
by one SQLite database (a file, or ``:memory:`` for tests and simulations);
every public method runs in a transaction guarded by a process-wide lock, and
methods may be grouped atomically with :meth:`Catalog.transaction`.

Work distribution uses stored lease rows rather than in-memory locks, so a
crashed agent strands nothing: its claims simply expire.
"""

from __future__ import annotations

import enum
import hashlib
import json
import logging
import sqlite3
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterable, Optional

from granule_dds.clock import WallClock
from granule_dds.errors import (
    CollectionClosed, InvalidArgument, InvalidFilter, NotFound,
    PreconditionError, StorageError, VersionConflict,
)
from granule_dds.model import (
    Collection, CollectionStatus, Content, ContentEvent, ContentStatus, Message,
    MessageStatus, MessageType, Relation, Request, RequestEvent, RequestStatus,
    TERMINAL_REQUEST_STATUSES, Transform, TransformStatus, check_message_transition,
    as_enum, derive_collection_counters, next_content_status, next_request_status,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class ItemKind(str, enum.Enum):
    REQUEST = "request"
    TRANSFORM = "transform"
    MESSAGE_BATCH = "message_batch"


@dataclass
class CatalogConfig:
    storage_path: str = ":memory:"
    lease_seconds_default: int = 60
    page_size_max: int = 1000

    def __post_init__(self):
        if self.lease_seconds_default < 1 or self.page_size_max < 1:
            raise InvalidArgument("catalog limits must be positive")


@dataclass
class WorkClaim:
    item_kind: ItemKind
    item_id: int
    agent_id: str
    claimed_at: float
    lease_seconds: int


_SCHEMA = """
CREATE TABLE IF NOT EXISTS meta (key TEXT PRIMARY KEY, value TEXT NOT NULL);
CREATE TABLE IF NOT EXISTS requests (
    request_id INTEGER PRIMARY KEY AUTOINCREMENT,
    scope TEXT NOT NULL, name TEXT NOT NULL, request_type TEXT NOT NULL,
    transform_tag TEXT NOT NULL, granularity TEXT NOT NULL, chunk_size INTEGER,
    priority INTEGER NOT NULL, status TEXT NOT NULL,
    created_at REAL NOT NULL, updated_at REAL NOT NULL,
    lifetime_seconds INTEGER NOT NULL, metadata TEXT NOT NULL,
    version INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS requests_status ON requests (status);
CREATE TABLE IF NOT EXISTS collections (
    collection_id INTEGER PRIMARY KEY AUTOINCREMENT,
    request_id INTEGER NOT NULL REFERENCES requests (request_id),
    relation TEXT NOT NULL, scope TEXT NOT NULL, name TEXT NOT NULL,
    total_contents INTEGER NOT NULL, available_contents INTEGER NOT NULL,
    delivered_contents INTEGER NOT NULL, status TEXT NOT NULL,
    version INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS collections_request ON collections (request_id);
CREATE TABLE IF NOT EXISTS contents (
    content_id INTEGER PRIMARY KEY AUTOINCREMENT,
    collection_id INTEGER NOT NULL REFERENCES collections (collection_id),
    content_key TEXT NOT NULL,
    scope TEXT NOT NULL, name TEXT NOT NULL,
    min_id INTEGER NOT NULL, max_id INTEGER NOT NULL,
    status TEXT NOT NULL, size_bytes INTEGER NOT NULL,
    checksum TEXT NOT NULL, locator TEXT NOT NULL,
    parent_content_id INTEGER REFERENCES contents (content_id),
    version INTEGER NOT NULL,
    UNIQUE (collection_id, content_key)
);
CREATE INDEX IF NOT EXISTS contents_status ON contents (collection_id, status);
CREATE INDEX IF NOT EXISTS contents_parent ON contents (parent_content_id);
CREATE TABLE IF NOT EXISTS content_history (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    content_id INTEGER NOT NULL, from_status TEXT, to_status TEXT NOT NULL,
    at REAL NOT NULL
);
CREATE INDEX IF NOT EXISTS content_history_content ON content_history (content_id);
CREATE TABLE IF NOT EXISTS transforms (
    transform_id INTEGER PRIMARY KEY AUTOINCREMENT,
    request_id INTEGER NOT NULL REFERENCES requests (request_id),
    transform_tag TEXT NOT NULL, status TEXT NOT NULL,
    retries INTEGER NOT NULL, max_retries INTEGER NOT NULL,
    version INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS messages (
    msg_id INTEGER PRIMARY KEY AUTOINCREMENT,
    request_id INTEGER NOT NULL, msg_type TEXT NOT NULL,
    dedup_key TEXT NOT NULL UNIQUE, content_ids TEXT NOT NULL,
    status TEXT NOT NULL, created_at REAL NOT NULL, version INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS messages_request ON messages (request_id, status);
CREATE TABLE IF NOT EXISTS message_contents (
    msg_id INTEGER NOT NULL, content_id INTEGER NOT NULL,
    PRIMARY KEY (msg_id, content_id)
);
CREATE INDEX IF NOT EXISTS message_contents_content ON message_contents (content_id);
CREATE TABLE IF NOT EXISTS claims (
    item_kind TEXT NOT NULL, item_id INTEGER NOT NULL, agent_id TEXT NOT NULL,
    claimed_at REAL NOT NULL, lease_seconds INTEGER NOT NULL,
    PRIMARY KEY (item_kind, item_id)
);
CREATE TABLE IF NOT EXISTS heartbeats (
    agent_id TEXT PRIMARY KEY, agent_kind TEXT NOT NULL, at REAL NOT NULL
);
"""

# (table, primary key, mutable columns) per item kind for update_with_version.
_TABLES = {
    "request": ("requests", "request_id", {
        "status", "priority", "lifetime_seconds", "metadata", "updated_at"}),
    "collection": ("collections", "collection_id", {
        "status", "total_contents", "available_contents", "delivered_contents"}),
    "content": ("contents", "content_id", {
        "status", "size_bytes", "checksum", "locator"}),
    "transform": ("transforms", "transform_id", {"status", "retries", "max_retries"}),
    "message": ("messages", "msg_id", {"status"}),
}

_SNAPSHOT_TABLES = (
    "requests", "collections", "contents", "content_history", "transforms",
    "messages", "message_contents", "claims",
)


def _db_value(value):
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, dict):
        return json.dumps(value, sort_keys=True)
    return value


class Catalog:
    def __init__(self, config: Optional[CatalogConfig] = None, clock=None):
        self.config = config or CatalogConfig()
        self.clock = clock or WallClock()
        self._lock = threading.RLock()
        self._depth = 0
        try:
            self._conn = sqlite3.connect(
                self.config.storage_path, check_same_thread=False, isolation_level=None)
            self._conn.row_factory = sqlite3.Row
            if self.config.storage_path != ":memory:":
                self._conn.execute("PRAGMA journal_mode=WAL")
                self._conn.execute("PRAGMA synchronous=FULL")
            self._conn.executescript(_SCHEMA)
            self._conn.execute(
                "INSERT OR IGNORE INTO meta (key, value) VALUES ('schema_version', ?)",
                (str(SCHEMA_VERSION),))
        except sqlite3.Error as exc:
            raise StorageError(str(exc)) from exc

    # -- plumbing -------------------------------------------------------------

    @contextmanager
    def transaction(self):
        """Group several catalog calls into one atomic, serialized unit."""
        with self._lock:
            outer = self._depth == 0
            if outer:
                self._q("BEGIN IMMEDIATE")
            self._depth += 1
            try:
                yield self
            except BaseException:
                self._depth -= 1
                if outer:
                    self._rollback()
                raise
            self._depth -= 1
            if outer:
                try:
                    self._q("COMMIT")
                except StorageError:
                    self._rollback()
                    raise

    def _rollback(self):
        try:
            if self._conn.in_transaction:
                self._conn.execute("ROLLBACK")
        except sqlite3.Error:
            logger.exception("rollback failed")

    def _q(self, sql, params=()):
        try:
            return self._conn.execute(sql, params)
        except sqlite3.Error as exc:
            raise StorageError(str(exc)) from exc

    def _qm(self, sql, seq):
        try:
            return self._conn.executemany(sql, seq)
        except sqlite3.Error as exc:
            raise StorageError(str(exc)) from exc

    def close(self):
        with self._lock:
            self._conn.close()

    def ping(self) -> None:
        """Raise StorageError unless the store answers a trivial query."""
        with self._lock:
            try:
                self._conn.execute("SELECT 1").fetchone()
            except sqlite3.Error as exc:
                raise StorageError(str(exc)) from exc

    # -- requests -------------------------------------------------------------

    def register_request(self, request: Request) -> tuple[int, bool]:
        """Store a new request; returns ``(request_id, created)``.

        A live request with the same (scope, name, transform_tag,
        request_type) is returned instead of creating a duplicate.
        """
        if request.status is not RequestStatus.NEW or request.version != 0:
            raise PreconditionError("new requests must have status new and version 0")
        now = self.clock.now()
        with self.transaction():
            terminal = [s.value for s in TERMINAL_REQUEST_STATUSES]
            row = self._q(
                "SELECT request_id FROM requests WHERE scope=? AND name=? AND transform_tag=?"
                " AND request_type=? AND status NOT IN (?,?,?,?) ORDER BY request_id LIMIT 1",
                (request.scope, request.name, request.transform_tag,
                 request.request_type.value, *terminal)).fetchone()
            if row is not None:
                return row["request_id"], False
            cur = self._q(
                "INSERT INTO requests (scope, name, request_type, transform_tag, granularity,"
                " chunk_size, priority, status, created_at, updated_at, lifetime_seconds,"
                " metadata, version) VALUES (?,?,?,?,?,?,?,?,?,?,?,?,0)",
                (request.scope, request.name, request.request_type.value,
                 request.transform_tag, request.granularity.value, request.chunk_size,
                 request.priority, RequestStatus.NEW.value, now, now,
                 request.lifetime_seconds, json.dumps(request.metadata, sort_keys=True)))
            request_id = cur.lastrowid
            for relation in Relation:
                self._q(
                    "INSERT INTO collections (request_id, relation, scope, name, total_contents,"
                    " available_contents, delivered_contents, status, version)"
                    " VALUES (?,?,?,?,0,0,0,?,0)",
                    (request_id, relation.value, request.scope, request.name,
                     CollectionStatus.OPEN.value))
            self._q(
                "INSERT INTO transforms (request_id, transform_tag, status, retries,"
                " max_retries, version) VALUES (?,?,?,0,?,0)",
                (request_id, request.transform_tag, TransformStatus.NEW.value,
                 int(request.metadata.get("max_retries", 2))))
        return request_id, True

    def insert_request(self, request: Request) -> int:
        return self.register_request(request)[0]

    def get_request(self, request_id: int) -> Request:
        with self._lock:
            row = self._q("SELECT * FROM requests WHERE request_id=?", (request_id,)).fetchone()
        if row is None:
            raise NotFound(f"request {request_id}")
        return _request_from_row(row)

    def list_requests(self, statuses: Optional[Iterable[RequestStatus]] = None) -> list[Request]:
        sql, params = "SELECT * FROM requests", []
        if statuses is not None:
            statuses = [RequestStatus(s).value for s in statuses]
            sql += f" WHERE status IN ({','.join('?' * len(statuses))})"
            params = statuses
        with self._lock:
            rows = self._q(sql + " ORDER BY request_id", params).fetchall()
        return [_request_from_row(r) for r in rows]

    def apply_request_event(self, request_id: int, event: RequestEvent) -> RequestStatus:
        with self.transaction():
            req = self.get_request(request_id)
            new = next_request_status(req.status, event)
            self._q(
                "UPDATE requests SET status=?, updated_at=?, version=version+1"
                " WHERE request_id=?", (new.value, max(self.clock.now(), req.created_at),
                                        request_id))
        return new

    # -- collections and transforms -------------------------------------------

    def get_collections(self, request_id: int,
                        relation: Optional[Relation] = None) -> list[Collection]:
        sql, params = "SELECT * FROM collections WHERE request_id=?", [request_id]
        if relation is not None:
            sql += " AND relation=?"
            params.append(Relation(relation).value)
        with self._lock:
            rows = self._q(sql + " ORDER BY collection_id", params).fetchall()
        return [_collection_from_row(r) for r in rows]

    def get_collection(self, collection_id: int) -> Collection:
        with self._lock:
            row = self._q("SELECT * FROM collections WHERE collection_id=?",
                          (collection_id,)).fetchone()
        if row is None:
            raise NotFound(f"collection {collection_id}")
        return _collection_from_row(row)

    def collection_of(self, request_id: int, relation: Relation) -> Collection:
        cols = self.get_collections(request_id, relation)
        if not cols:
            raise NotFound(f"{Relation(relation).value} collection of request {request_id}")
        return cols[0]

    def close_collection(self, collection_id: int) -> bool:
        """Mark a collection Closed; returns False if it already was."""
        with self.transaction():
            col = self.get_collection(collection_id)
            if col.status is CollectionStatus.CLOSED:
                return False
            self._q("UPDATE collections SET status=?, version=version+1 WHERE collection_id=?",
                    (CollectionStatus.CLOSED.value, collection_id))
        return True

    def get_transform(self, transform_id: int) -> Transform:
        with self._lock:
            row = self._q("SELECT * FROM transforms WHERE transform_id=?",
                          (transform_id,)).fetchone()
        if row is None:
            raise NotFound(f"transform {transform_id}")
        return _transform_from_row(row)

    def transform_of(self, request_id: int) -> Transform:
        with self._lock:
            row = self._q("SELECT * FROM transforms WHERE request_id=?"
                          " ORDER BY transform_id LIMIT 1", (request_id,)).fetchone()
        if row is None:
            raise NotFound(f"transform of request {request_id}")
        return _transform_from_row(row)

    # -- work claiming --------------------------------------------------------

    def claim_work(self, item_kind: ItemKind, eligible_statuses, limit: int,
                   agent_id: str, lease_seconds: Optional[int] = None) -> list:
        """Atomically lease up to ``limit`` eligible, unclaimed items.

        Request and message-batch items are requests (filtered on request
        status); transform items are transforms. Claims already held by
        ``agent_id`` itself are renewed, so a restarted agent resumes its work.
        """
        if limit < 1:
            raise InvalidArgument("limit must be >= 1")
        item_kind = ItemKind(item_kind)
        lease = lease_seconds or self.config.lease_seconds_default
        table, key = (("transforms", "transform_id") if item_kind is ItemKind.TRANSFORM
                      else ("requests", "request_id"))
        statuses = [s.value for s in eligible_statuses]
        if not statuses:
            return []
        now = self.clock.now()
        with self.transaction():
            rows = self._q(
                f"SELECT * FROM {table} WHERE status IN ({','.join('?' * len(statuses))})"
                f" AND {key} NOT IN (SELECT item_id FROM claims WHERE item_kind=?"
                f" AND agent_id<>? AND claimed_at + lease_seconds > ?)"
                f" ORDER BY {key} LIMIT ?",
                (*statuses, item_kind.value, agent_id, now, limit)).fetchall()
            self._qm(
                "INSERT OR REPLACE INTO claims (item_kind, item_id, agent_id, claimed_at,"
                " lease_seconds) VALUES (?,?,?,?,?)",
                [(item_kind.value, r[key], agent_id, now, lease) for r in rows])
        if item_kind is ItemKind.TRANSFORM:
            return [_transform_from_row(r) for r in rows]
        return [_request_from_row(r) for r in rows]

    def release_claims(self, agent_id: str, item_kind: Optional[ItemKind] = None) -> int:
        with self._lock:
            if item_kind is None:
                cur = self._q("DELETE FROM claims WHERE agent_id=?", (agent_id,))
            else:
                cur = self._q("DELETE FROM claims WHERE agent_id=? AND item_kind=?",
                              (agent_id, ItemKind(item_kind).value))
        return cur.rowcount

    def claims(self) -> list[WorkClaim]:
        with self._lock:
            rows = self._q("SELECT * FROM claims ORDER BY item_kind, item_id").fetchall()
        return [WorkClaim(ItemKind(r["item_kind"]), r["item_id"], r["agent_id"],
                          r["claimed_at"], r["lease_seconds"]) for r in rows]

    # -- optimistic concurrency -----------------------------------------------

    def update_with_version(self, item_kind: str, item_id: int, expected_version: int,
                            changes: dict) -> int:
        try:
            table, key, mutable = _TABLES[item_kind]
        except KeyError:
            raise InvalidArgument(f"unknown item kind {item_kind!r}") from None
        unknown = set(changes) - mutable
        if unknown:
            raise InvalidArgument(f"immutable or unknown fields {sorted(unknown)}")
        with self.transaction():
            row = self._q(f"SELECT * FROM {table} WHERE {key}=?", (item_id,)).fetchone()
            if row is None:
                raise NotFound(f"{item_kind} {item_id}")
            if row["version"] != expected_version:
                raise VersionConflict(item_kind, item_id, expected_version, row["version"])
            assignments = ", ".join(f"{col}=?" for col in changes)
            values = [_db_value(v) for v in changes.values()]
            if item_kind == "request" and "updated_at" not in changes:
                assignments += ", updated_at=?"
                values.append(max(self.clock.now(), row["created_at"]))
            self._q(f"UPDATE {table} SET {assignments}, version=version+1 WHERE {key}=?",
                    (*values, item_id))
            if item_kind == "content" and "status" in changes:
                new = ContentStatus(changes["status"]).value
                if new != row["status"]:
                    self._q("INSERT INTO content_history (content_id, from_status, to_status,"
                            " at) VALUES (?,?,?,?)", (item_id, row["status"], new,
                                                     self.clock.now()))
                self._refresh_counters([row["collection_id"]])
        return expected_version + 1

    # -- contents -------------------------------------------------------------

    def bulk_upsert_contents(self, collection_id: int,
                             contents: Iterable[Content]) -> tuple[int, int]:
        """Insert contents not already present (by canonical key)."""
        now = self.clock.now()
        inserted = duplicates = 0
        with self.transaction():
            col = self.get_collection(collection_id)
            if col.status is CollectionStatus.CLOSED:
                raise CollectionClosed(f"collection {collection_id} is closed")
            is_output = col.relation is Relation.OUTPUT
            for c in contents:
                if is_output != (c.parent_content_id is not None):
                    raise InvalidArgument(
                        "output contents need a parent link, input contents may not have one")
                cur = self._q(
                    "INSERT OR IGNORE INTO contents (collection_id, content_key, scope, name,"
                    " min_id, max_id, status, size_bytes, checksum, locator,"
                    " parent_content_id, version) VALUES (?,?,?,?,?,?,?,?,?,?,?,0)",
                    (collection_id, c.key, c.scope, c.name, c.min_id, c.max_id,
                     c.status.value, c.size_bytes, c.checksum, c.locator,
                     c.parent_content_id))
                if cur.rowcount:
                    inserted += 1
                    self._q("INSERT INTO content_history (content_id, from_status, to_status,"
                            " at) VALUES (?,NULL,?,?)", (cur.lastrowid, c.status.value, now))
                else:
                    duplicates += 1
            if inserted:
                self._refresh_counters([collection_id])
        return inserted, duplicates

    def transition_contents(self, content_ids: Iterable[int], event: ContentEvent) -> list[int]:
        """Apply one lifecycle event to several contents atomically.

        Every content must accept the event; otherwise nothing changes and
        IllegalTransition is raised.
        """
        ids = list(dict.fromkeys(content_ids))
        if not ids:
            return []
        now = self.clock.now()
        with self.transaction():
            rows = self._rows_by_ids("contents", "content_id", ids)
            if len(rows) != len(ids):
                missing = set(ids) - {r["content_id"] for r in rows}
                raise NotFound(f"contents {sorted(missing)}")
            updates = []
            for r in rows:
                new = next_content_status(as_enum(ContentStatus, r["status"]), event)
                updates.append((new.value, r["content_id"], r["status"]))
            self._qm(
                "UPDATE contents SET status=?, version=version+1 WHERE content_id=?",
                [(u[0], u[1]) for u in updates])
            self._qm(
                "INSERT INTO content_history (content_id, from_status, to_status, at)"
                " VALUES (?,?,?,?)", [(u[1], u[2], u[0], now) for u in updates])
            self._refresh_counters({r["collection_id"] for r in rows})
        return ids

    def _rows_by_ids(self, table, key, ids):
        out = []
        for i in range(0, len(ids), 500):
            chunk = ids[i:i + 500]
            out.extend(self._q(
                f"SELECT * FROM {table} WHERE {key} IN ({','.join('?' * len(chunk))})"
                f" ORDER BY {key}", chunk).fetchall())
        return out

    def _refresh_counters(self, collection_ids):
        for cid in sorted(collection_ids):
            statuses = [r[0] for r in self._q(
                "SELECT status FROM contents WHERE collection_id=?", (cid,))]
            total, available, delivered = derive_collection_counters(statuses)
            self._q(
                "UPDATE collections SET total_contents=?, available_contents=?,"
                " delivered_contents=?, version=version+1 WHERE collection_id=?"
                " AND (total_contents, available_contents, delivered_contents) <> (?,?,?)",
                (total, available, delivered, cid, total, available, delivered))

    def get_content(self, content_id: int) -> Content:
        with self._lock:
            row = self._q("SELECT * FROM contents WHERE content_id=?", (content_id,)).fetchone()
        if row is None:
            raise NotFound(f"content {content_id}")
        return _content_from_row(row)

    def get_contents(self, content_ids: Iterable[int]) -> list[Content]:
        with self._lock:
            rows = self._rows_by_ids("contents", "content_id", list(content_ids))
        return [_content_from_row(r) for r in rows]

    def contents_of(self, collection_id: int,
                    statuses: Optional[Iterable[ContentStatus]] = None) -> list[Content]:
        """All contents of one collection, unpaginated, content_id ascending."""
        sql, params = "SELECT * FROM contents WHERE collection_id=?", [collection_id]
        if statuses is not None:
            statuses = [ContentStatus(s).value for s in statuses]
            sql += f" AND status IN ({','.join('?' * len(statuses))})"
            params += statuses
        with self._lock:
            rows = self._q(sql + " ORDER BY content_id", params).fetchall()
        return [_content_from_row(r) for r in rows]

    def children_of(self, parent_ids: Iterable[int]) -> dict[int, list[Content]]:
        parent_ids = list(parent_ids)
        out = {pid: [] for pid in parent_ids}
        with self._lock:
            rows = self._rows_by_ids("contents", "parent_content_id", parent_ids)
        for r in rows:
            out[r["parent_content_id"]].append(_content_from_row(r))
        for children in out.values():
            children.sort(key=lambda c: c.content_id)
        return out

    def unconsumed_inputs(self, request_id: int) -> list[Content]:
        """Input contents that are staged or failed but have no derived output yet."""
        inp = self.collection_of(request_id, Relation.INPUT)
        with self._lock:
            rows = self._q(
                "SELECT * FROM contents c WHERE c.collection_id=? AND c.status IN (?,?)"
                " AND NOT EXISTS (SELECT 1 FROM contents o WHERE o.parent_content_id"
                " = c.content_id) ORDER BY c.content_id",
                (inp.collection_id, ContentStatus.AVAILABLE.value,
                 ContentStatus.FAILED.value)).fetchall()
        return [_content_from_row(r) for r in rows]

    def query_contents(self, request_id: Optional[int] = None,
                       collection_id: Optional[int] = None,
                       statuses: Optional[Iterable[ContentStatus]] = None,
                       page_token: Optional[str] = None,
                       page_size: Optional[int] = None,
                       relation: Optional[Relation] = None) -> tuple[list[Content], str]:
        """One page of contents in content_id order, plus the next page token."""
        if request_id is None and collection_id is None:
            raise InvalidFilter("a request_id or collection_id selector is required")
        cap = self.config.page_size_max
        size = cap if page_size is None else min(page_size, cap)
        if size < 1:
            raise InvalidFilter("page size must be positive")
        after = 0
        if page_token:
            try:
                after = int(page_token)
            except ValueError:
                raise InvalidFilter(f"malformed page token {page_token!r}") from None
        where, params = ["c.content_id > ?"], [after]
        if request_id is not None:
            where.append("k.request_id = ?")
            params.append(request_id)
        if collection_id is not None:
            where.append("c.collection_id = ?")
            params.append(collection_id)
        if relation is not None:
            where.append("k.relation = ?")
            params.append(Relation(relation).value)
        if statuses is not None:
            statuses = [ContentStatus(s).value for s in statuses]
            if not statuses:
                return [], ""
            where.append(f"c.status IN ({','.join('?' * len(statuses))})")
            params += statuses
        sql = ("SELECT c.* FROM contents c JOIN collections k ON k.collection_id ="
               f" c.collection_id WHERE {' AND '.join(where)} ORDER BY c.content_id LIMIT ?")
        with self._lock:
            rows = self._q(sql, (*params, size + 1)).fetchall()
        page = [_content_from_row(r) for r in rows[:size]]
        token = str(page[-1].content_id) if len(rows) > size else ""
        return page, token

    def content_history(self, content_id: int) -> list[tuple[ContentStatus, float]]:
        with self._lock:
            rows = self._q("SELECT to_status, at FROM content_history WHERE content_id=?"
                           " ORDER BY seq", (content_id,)).fetchall()
        return [(as_enum(ContentStatus, r["to_status"]), r["at"]) for r in rows]

    def all_histories(self) -> dict[int, list[tuple[ContentStatus, float]]]:
        out: dict[int, list] = {}
        with self._lock:
            rows = self._q("SELECT content_id, to_status, at FROM content_history"
                           " ORDER BY seq").fetchall()
        for r in rows:
            status = as_enum(ContentStatus, r["to_status"])
            out.setdefault(r["content_id"], []).append((status, r["at"]))
        return out

    # -- messages -------------------------------------------------------------

    def record_message(self, message: Message) -> int:
        """Store a message; a known dedup_key returns the original msg_id."""
        if message.status is not MessageStatus.NEW:
            raise PreconditionError("messages are recorded with status new")
        with self.transaction():
            row = self._q("SELECT msg_id FROM messages WHERE dedup_key=?",
                          (message.dedup_key,)).fetchone()
            if row is not None:
                return row["msg_id"]
            cur = self._q(
                "INSERT INTO messages (request_id, msg_type, dedup_key, content_ids, status,"
                " created_at, version) VALUES (?,?,?,?,?,?,0)",
                (message.request_id, message.msg_type.value, message.dedup_key,
                 json.dumps(list(message.content_ids)), MessageStatus.NEW.value,
                 message.created_at or self.clock.now()))
            self._qm(
                "INSERT INTO message_contents (msg_id, content_id) VALUES (?,?)",
                [(cur.lastrowid, cid) for cid in message.content_ids])
        return cur.lastrowid

    def mark_message(self, msg_id: int, new_status: MessageStatus) -> None:
        with self.transaction():
            msg = self.get_message(msg_id)
            check_message_transition(msg.status, new_status)
            self._q("UPDATE messages SET status=?, version=version+1 WHERE msg_id=?",
                    (MessageStatus(new_status).value, msg_id))

    def get_message(self, msg_id: int) -> Message:
        with self._lock:
            row = self._q("SELECT * FROM messages WHERE msg_id=?", (msg_id,)).fetchone()
        if row is None:
            raise NotFound(f"message {msg_id}")
        return _message_from_row(row)

    def find_message(self, dedup_key: str) -> Optional[Message]:
        with self._lock:
            row = self._q("SELECT * FROM messages WHERE dedup_key=?", (dedup_key,)).fetchone()
        return None if row is None else _message_from_row(row)

    def messages(self, request_id: Optional[int] = None,
                 statuses: Optional[Iterable[MessageStatus]] = None,
                 msg_type: Optional[MessageType] = None) -> list[Message]:
        where, params = [], []
        if request_id is not None:
            where.append("request_id=?")
            params.append(request_id)
        if statuses is not None:
            statuses = [MessageStatus(s).value for s in statuses]
            where.append(f"status IN ({','.join('?' * len(statuses))})")
            params += statuses
        if msg_type is not None:
            where.append("msg_type=?")
            params.append(MessageType(msg_type).value)
        sql = "SELECT * FROM messages"
        if where:
            sql += " WHERE " + " AND ".join(where)
        with self._lock:
            rows = self._q(sql + " ORDER BY msg_id", params).fetchall()
        return [_message_from_row(r) for r in rows]

    def acked_pending_messages(self, request_id: Optional[int] = None) -> list[int]:
        """Acked messages that still cover at least one Delivering content."""
        sql = ("SELECT DISTINCT m.msg_id FROM messages m JOIN message_contents mc ON"
               " mc.msg_id = m.msg_id JOIN contents c ON c.content_id = mc.content_id"
               " WHERE m.status=? AND c.status=?")
        params = [MessageStatus.ACKED.value, ContentStatus.DELIVERING.value]
        if request_id is not None:
            sql += " AND m.request_id=?"
            params.append(request_id)
        with self._lock:
            return [r[0] for r in self._q(sql + " ORDER BY m.msg_id", params)]

    # -- heartbeats -----------------------------------------------------------

    def heartbeat(self, agent_kind: str, agent_id: str) -> None:
        with self.transaction():
            self._q("INSERT OR REPLACE INTO heartbeats (agent_id, agent_kind, at)"
                    " VALUES (?,?,?)", (agent_id, agent_kind, self.clock.now()))

    def heartbeats(self) -> dict[str, float]:
        """Latest heartbeat time per agent kind."""
        with self._lock:
            rows = self._q("SELECT agent_kind, MAX(at) AS at FROM heartbeats"
                           " GROUP BY agent_kind ORDER BY agent_kind").fetchall()
        return {r["agent_kind"]: r["at"] for r in rows}

    # -- auditing -------------------------------------------------------------

    def audit_counters(self) -> list[dict]:
        """Collections whose stored counters disagree with their raw contents."""
        bad = []
        with self._lock:
            for col in self._q("SELECT * FROM collections ORDER BY collection_id").fetchall():
                statuses = [r[0] for r in self._q(
                    "SELECT status FROM contents WHERE collection_id=?",
                    (col["collection_id"],))]
                derived = derive_collection_counters(statuses)
                stored = (col["total_contents"], col["available_contents"],
                          col["delivered_contents"])
                if derived != stored:
                    bad.append({"collection_id": col["collection_id"],
                                "stored": list(stored), "derived": list(derived)})
        return bad

    def snapshot(self) -> dict:
        """Every persisted row except heartbeats, as plain JSON-able data."""
        with self._lock:
            return {t: [dict(r) for r in self._q(f"SELECT * FROM {t} ORDER BY rowid")]
                    for t in _SNAPSHOT_TABLES}

    def fingerprint(self) -> str:
        blob = json.dumps(self.snapshot(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _request_from_row(r) -> Request:
    return Request(
        request_id=r["request_id"], scope=r["scope"], name=r["name"],
        request_type=r["request_type"], transform_tag=r["transform_tag"],
        granularity=r["granularity"], chunk_size=r["chunk_size"], priority=r["priority"],
        status=r["status"], created_at=r["created_at"], updated_at=r["updated_at"],
        lifetime_seconds=r["lifetime_seconds"], version=r["version"],
        metadata=json.loads(r["metadata"]) if r["metadata"] != "{}" else {})


def _collection_from_row(r) -> Collection:
    return Collection(
        collection_id=r["collection_id"], request_id=r["request_id"], relation=r["relation"],
        scope=r["scope"], name=r["name"], total_contents=r["total_contents"],
        available_contents=r["available_contents"],
        delivered_contents=r["delivered_contents"], status=r["status"], version=r["version"])


def _content_from_row(r) -> Content:
    return Content(
        content_id=r["content_id"], collection_id=r["collection_id"], scope=r["scope"],
        name=r["name"], min_id=r["min_id"], max_id=r["max_id"], status=r["status"],
        size_bytes=r["size_bytes"], checksum=r["checksum"], locator=r["locator"],
        parent_content_id=r["parent_content_id"], version=r["version"])


def _transform_from_row(r) -> Transform:
    return Transform(
        transform_id=r["transform_id"], request_id=r["request_id"],
        transform_tag=r["transform_tag"], status=r["status"], retries=r["retries"],
        max_retries=r["max_retries"], version=r["version"])


def _message_from_row(r) -> Message:
    return Message(
        msg_id=r["msg_id"], request_id=r["request_id"], msg_type=r["msg_type"],
        dedup_key=r["dedup_key"], content_ids=json.loads(r["content_ids"]),
        status=r["status"], created_at=r["created_at"], version=r["version"])
