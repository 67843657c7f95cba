"""Consumer notifiers.

Notification is one-directional: consumers acknowledge through the REST ack
endpoint, which writes to the catalog, and ``poll_acks`` reads it back.
"""

from __future__ import annotations

import json
import threading
from typing import Callable

from granule_dds.errors import NotifyError
from granule_dds.plugins.base import NotifierPlugin

LOG_FIELDS = ("msg_id", "dedup_key", "msg_type", "request_id", "contents")


def message_line(message, payload: dict) -> str:
    record = {
        "msg_id": message.msg_id,
        "dedup_key": message.dedup_key,
        "msg_type": message.msg_type.value,
        "request_id": message.request_id,
        "contents": list(payload.get("contents", [])),
    }
    return json.dumps(record, ensure_ascii=False)


class _CatalogAcks:
    def __init__(self, catalog):
        self.catalog = catalog

    def poll_acks(self, request_id=None):
        return self.catalog.acked_pending_messages(request_id)


class FileQueueNotifier(_CatalogAcks, NotifierPlugin):
    """Appends one JSON line per sent message to ``messages.log``."""

    def __init__(self, catalog, path="messages.log"):
        super().__init__(catalog)
        self.path = path
        self._lock = threading.Lock()

    def send(self, message, payload):
        line = message_line(message, payload)
        try:
            with self._lock, open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
                fh.flush()
        except OSError as exc:
            raise NotifyError(f"cannot append to {self.path}: {exc}") from exc


class CallbackNotifier(_CatalogAcks, NotifierPlugin):
    """Hands every message to an in-process callable (used by the harness)."""

    def __init__(self, catalog, callback: Callable[[object, dict], None]):
        super().__init__(catalog)
        self.callback = callback

    def send(self, message, payload):
        self.callback(message, payload)


def read_message_log(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
