"""Domain types, status enumerations and lifecycle state machines.

Everything here is pure: no I/O, no clocks, no shared state. The catalog,
the agents and the harness all route status changes through
:func:`next_request_status` and :func:`next_content_status` so that the
transition tables below are the single source of truth.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Optional

from granule_dds.errors import IllegalTransition, InvalidArgument

KEY_SEPARATOR = ":"


class RequestType(str, enum.Enum):
    STAGE_IN = "stage_in"
    TRANSFORM = "transform"
    EVENT_STREAM = "event_stream"


class Granularity(str, enum.Enum):
    FILE = "file"
    EVENT_RANGE = "event_range"


class RequestStatus(str, enum.Enum):
    NEW = "new"
    IN_PROGRESS = "in_progress"
    FINISHED = "finished"
    SUB_FINISHED = "sub_finished"
    FAILED = "failed"
    CANCELLED = "cancelled"

    @property
    def terminal(self) -> bool:
        return self in TERMINAL_REQUEST_STATUSES


class RequestEvent(str, enum.Enum):
    CLAIM = "claim"
    ALL_DELIVERED = "all_delivered"
    MIXED_TERMINAL = "mixed_terminal"
    ALL_FAILED = "all_failed"
    CANCEL = "cancel"


class ContentStatus(str, enum.Enum):
    NEW = "new"
    STAGING = "staging"
    AVAILABLE = "available"
    DELIVERING = "delivering"
    DELIVERED = "delivered"
    FAILED = "failed"
    RELEASED = "released"


class ContentEvent(str, enum.Enum):
    STAGE_REQUESTED = "stage_requested"
    STAGED = "staged"
    ALREADY_ON_DISK = "already_on_disk"
    NOTIFY_SENT = "notify_sent"
    ACKED = "acked"
    RELEASE_INPUT = "release_input"
    FAIL = "fail"


class Relation(str, enum.Enum):
    INPUT = "input"
    OUTPUT = "output"


class CollectionStatus(str, enum.Enum):
    OPEN = "open"
    CLOSED = "closed"


class TransformStatus(str, enum.Enum):
    NEW = "new"
    RUNNING = "running"
    FINISHED = "finished"
    FAILED = "failed"


class MessageType(str, enum.Enum):
    CONTENT_AVAILABLE = "content_available"
    COLLECTION_CLOSED = "collection_closed"
    REQUEST_FINISHED = "request_finished"


class MessageStatus(str, enum.Enum):
    NEW = "new"
    SENT = "sent"
    ACKED = "acked"


TERMINAL_REQUEST_STATUSES = frozenset({
    RequestStatus.FINISHED, RequestStatus.SUB_FINISHED,
    RequestStatus.FAILED, RequestStatus.CANCELLED,
})

REQUEST_TRANSITIONS = {
    (RequestStatus.NEW, RequestEvent.CLAIM): RequestStatus.IN_PROGRESS,
    (RequestStatus.IN_PROGRESS, RequestEvent.ALL_DELIVERED): RequestStatus.FINISHED,
    (RequestStatus.IN_PROGRESS, RequestEvent.MIXED_TERMINAL): RequestStatus.SUB_FINISHED,
    (RequestStatus.IN_PROGRESS, RequestEvent.ALL_FAILED): RequestStatus.FAILED,
    (RequestStatus.NEW, RequestEvent.CANCEL): RequestStatus.CANCELLED,
    (RequestStatus.IN_PROGRESS, RequestEvent.CANCEL): RequestStatus.CANCELLED,
}

CONTENT_TRANSITIONS = {
    (ContentStatus.NEW, ContentEvent.STAGE_REQUESTED): ContentStatus.STAGING,
    (ContentStatus.STAGING, ContentEvent.STAGED): ContentStatus.AVAILABLE,
    (ContentStatus.NEW, ContentEvent.ALREADY_ON_DISK): ContentStatus.AVAILABLE,
    (ContentStatus.AVAILABLE, ContentEvent.NOTIFY_SENT): ContentStatus.DELIVERING,
    (ContentStatus.DELIVERING, ContentEvent.ACKED): ContentStatus.DELIVERED,
    (ContentStatus.DELIVERED, ContentEvent.RELEASE_INPUT): ContentStatus.RELEASED,
    (ContentStatus.NEW, ContentEvent.FAIL): ContentStatus.FAILED,
    (ContentStatus.STAGING, ContentEvent.FAIL): ContentStatus.FAILED,
    (ContentStatus.DELIVERING, ContentEvent.FAIL): ContentStatus.FAILED,
}

# Statuses a content may carry when first written to the catalog: inputs are
# born New, transform outputs Available, outputs of a failed input Failed.
INITIAL_CONTENT_STATUSES = frozenset({
    ContentStatus.NEW, ContentStatus.AVAILABLE, ContentStatus.FAILED,
})

MESSAGE_TRANSITIONS = {
    (MessageStatus.NEW, MessageStatus.SENT),
    (MessageStatus.SENT, MessageStatus.ACKED),
}

_COUNTED_AVAILABLE = frozenset({
    ContentStatus.AVAILABLE, ContentStatus.DELIVERING,
    ContentStatus.DELIVERED, ContentStatus.RELEASED,
})
_COUNTED_DELIVERED = frozenset({ContentStatus.DELIVERED, ContentStatus.RELEASED})
TERMINAL_CONTENT_STATUSES = frozenset({
    ContentStatus.DELIVERED, ContentStatus.RELEASED, ContentStatus.FAILED,
})


def as_enum(cls, value):
    """Enum member by value, skipping Enum.__call__ on hot paths."""
    member = cls._value2member_map_.get(value)
    return member if member is not None else cls(value)


@dataclass
class Request:
    scope: str
    name: str
    request_type: RequestType
    transform_tag: str
    granularity: Granularity = Granularity.FILE
    chunk_size: Optional[int] = None
    priority: int = 0
    status: RequestStatus = RequestStatus.NEW
    created_at: float = 0.0
    updated_at: float = 0.0
    lifetime_seconds: int = 86400
    metadata: dict = field(default_factory=dict)
    version: int = 0
    request_id: Optional[int] = None

    def __post_init__(self):
        self.request_type = as_enum(RequestType, self.request_type)
        self.granularity = as_enum(Granularity, self.granularity)
        self.status = as_enum(RequestStatus, self.status)
        if self.granularity is Granularity.EVENT_RANGE:
            if self.chunk_size is None or self.chunk_size < 1:
                raise InvalidArgument("event_range granularity requires chunk_size >= 1")
        if self.lifetime_seconds < 1:
            raise InvalidArgument("lifetime_seconds must be positive")


@dataclass
class Collection:
    request_id: int
    relation: Relation
    scope: str
    name: str
    total_contents: int = 0
    available_contents: int = 0
    delivered_contents: int = 0
    status: CollectionStatus = CollectionStatus.OPEN
    version: int = 0
    collection_id: Optional[int] = None

    def __post_init__(self):
        self.relation = as_enum(Relation, self.relation)
        self.status = as_enum(CollectionStatus, self.status)


@dataclass
class Content:
    scope: str
    name: str
    min_id: int = 0
    max_id: int = 0
    status: ContentStatus = ContentStatus.NEW
    size_bytes: int = 0
    checksum: str = ""
    locator: str = ""
    parent_content_id: Optional[int] = None
    collection_id: Optional[int] = None
    version: int = 0
    content_id: Optional[int] = None

    def __post_init__(self):
        self.status = as_enum(ContentStatus, self.status)
        if self.min_id < 0 or self.max_id < self.min_id:
            raise InvalidArgument(f"bad event range ({self.min_id}, {self.max_id})")

    @property
    def key(self) -> str:
        return canonical_content_key(self.scope, self.name, self.min_id, self.max_id)

    @property
    def event_count(self) -> int:
        return self.max_id - self.min_id + 1


@dataclass
class Transform:
    request_id: int
    transform_tag: str
    status: TransformStatus = TransformStatus.NEW
    retries: int = 0
    max_retries: int = 2
    version: int = 0
    transform_id: Optional[int] = None

    def __post_init__(self):
        self.status = as_enum(TransformStatus, self.status)


@dataclass
class Message:
    request_id: int
    msg_type: MessageType
    dedup_key: str
    content_ids: list = field(default_factory=list)
    status: MessageStatus = MessageStatus.NEW
    created_at: float = 0.0
    version: int = 0
    msg_id: Optional[int] = None

    def __post_init__(self):
        self.msg_type = as_enum(MessageType, self.msg_type)
        self.status = as_enum(MessageStatus, self.status)
        if self.msg_type is MessageType.CONTENT_AVAILABLE and not self.content_ids:
            raise InvalidArgument("content_available message needs content ids")


def next_request_status(current: RequestStatus, event: RequestEvent) -> RequestStatus:
    try:
        return REQUEST_TRANSITIONS[(RequestStatus(current), RequestEvent(event))]
    except KeyError:
        raise IllegalTransition(current, event) from None


def next_content_status(current: ContentStatus, event: ContentEvent) -> ContentStatus:
    try:
        return CONTENT_TRANSITIONS[(ContentStatus(current), ContentEvent(event))]
    except KeyError:
        raise IllegalTransition(current, event) from None


def check_message_transition(current: MessageStatus, new: MessageStatus) -> None:
    if (MessageStatus(current), MessageStatus(new)) not in MESSAGE_TRANSITIONS:
        raise IllegalTransition(current, new)


def is_content_path(statuses: Iterable[ContentStatus]) -> bool:
    """True if a recorded status history is a walk in the content graph."""
    statuses = [ContentStatus(s) for s in statuses]
    if not statuses or statuses[0] not in INITIAL_CONTENT_STATUSES:
        return False
    legal = {(src, dst) for (src, _), dst in CONTENT_TRANSITIONS.items()}
    return all(pair in legal for pair in zip(statuses, statuses[1:]))


def derive_collection_counters(statuses: Iterable[ContentStatus]) -> tuple[int, int, int]:
    total = available = delivered = 0
    for s in statuses:
        s = as_enum(ContentStatus, s)
        total += 1
        if s in _COUNTED_AVAILABLE:
            available += 1
        if s in _COUNTED_DELIVERED:
            delivered += 1
    return total, available, delivered


def derive_request_event(content_statuses: Iterable[ContentStatus],
                         collections_closed: bool) -> Optional[RequestEvent]:
    """Decide the request outcome once every output content is terminal.

    Returns None while output collections are still open or any content is
    in flight. An empty, closed output set counts as fully delivered.
    """
    if not collections_closed:
        return None
    statuses = [ContentStatus(s) for s in content_statuses]
    if any(s not in TERMINAL_CONTENT_STATUSES for s in statuses):
        return None
    failed = sum(1 for s in statuses if s is ContentStatus.FAILED)
    if failed == 0:
        return RequestEvent.ALL_DELIVERED
    if failed == len(statuses):
        return RequestEvent.ALL_FAILED
    return RequestEvent.MIXED_TERMINAL


def split_event_ranges(event_count: int, chunk_size: int) -> list[tuple[int, int]]:
    """Cut ``[0, event_count - 1]`` into inclusive ranges of ``chunk_size`` events.

    >>> split_event_ranges(10, 4)
    [(0, 3), (4, 7), (8, 9)]
    """
    if event_count < 1 or chunk_size < 1:
        raise InvalidArgument(
            f"event_count and chunk_size must be >= 1, got {event_count}, {chunk_size}")
    return [(lo, min(lo + chunk_size, event_count) - 1)
            for lo in range(0, event_count, chunk_size)]


def canonical_content_key(scope: str, name: str, min_id: int, max_id: int) -> str:
    for label, value in (("scope", scope), ("name", name)):
        if KEY_SEPARATOR in value:
            raise InvalidArgument(f"{label} may not contain {KEY_SEPARATOR!r}: {value!r}")
    return f"{scope}{KEY_SEPARATOR}{name}{KEY_SEPARATOR}{int(min_id)}{KEY_SEPARATOR}{int(max_id)}"
