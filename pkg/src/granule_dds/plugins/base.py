"""Base plugin classes. New backends inherit from these and get registered."""

from __future__ import annotations

import abc
import enum
from dataclasses import dataclass, replace
from typing import Optional

from granule_dds.model import Content, Message


class ReplicaState(str, enum.Enum):
    TAPE_ONLY = "tape_only"
    STAGING = "staging"
    ON_DISK = "on_disk"


@dataclass(frozen=True)
class Replica:
    scope: str
    name: str
    state: ReplicaState
    size_bytes: int
    event_count: Optional[int] = None
    locator: str = ""
    checksum: str = ""

    def with_state(self, state: ReplicaState) -> "Replica":
        return replace(self, state=state)


class DDMPlugin(abc.ABC):
    """A data management system: resolves datasets and moves replicas."""

    @abc.abstractmethod
    def list_files(self, scope: str, name: str) -> list[Replica]:
        ...

    @abc.abstractmethod
    def stage_in(self, replica: Replica) -> None:
        ...

    @abc.abstractmethod
    def poll_state(self, replica: Replica) -> Replica:
        ...

    @abc.abstractmethod
    def release(self, replica: Replica) -> None:
        ...


class TransformPlugin(abc.ABC):
    """Turns one available input content into one or more output descriptors.

    Outputs are returned as :class:`Content` objects without ids; the
    Transformer agent fills in the collection and persists them.
    """

    @abc.abstractmethod
    def transform(self, content: Content, params: dict) -> list[Content]:
        ...


class NotifierPlugin(abc.ABC):
    @abc.abstractmethod
    def send(self, message: Message, payload: dict) -> None:
        ...

    @abc.abstractmethod
    def poll_acks(self, request_id: Optional[int] = None) -> list[int]:
        ...
