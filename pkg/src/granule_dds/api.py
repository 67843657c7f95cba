"""RESTful front end: request registration and query, catalog browsing, acks.

Handlers are plain methods of :class:`ApiService` returning an
:class:`ApiResponse`; they touch only the catalog, never wait for agents, and
can be exercised without a socket. :func:`make_server` wraps them in a
threaded HTTP/1.1 server.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional, Union
from urllib.parse import parse_qs, urlsplit

import jsonschema

from granule_dds import schemas
from granule_dds.catalog import Catalog
from granule_dds.errors import IllegalTransition, InvalidFilter, NotFound, StorageError
from granule_dds.model import (
    Collection, Content, ContentStatus, Granularity, MessageStatus, Request, RequestType,
)
from granule_dds.plugins import PluginRegistry, default_registry

logger = logging.getLogger(__name__)

CONTENT_TYPE = "application/json; charset=utf-8"
API_PREFIX = "/api/v1"
ERROR_CODES = frozenset({"invalid_request", "not_found", "conflict", "internal"})

_DEFAULT_TAGS = {
    RequestType.STAGE_IN: "passthrough",
}


@dataclass
class ApiResponse:
    status: int
    body: dict

    def json(self) -> bytes:
        return json.dumps(self.body).encode("utf-8")


def error(status: int, code: str, detail: str) -> ApiResponse:
    assert code in ERROR_CODES
    return ApiResponse(status, {"code": code, "detail": detail})


def request_json(req: Request, collections: list[Collection]) -> dict:
    return {
        "request_id": req.request_id, "scope": req.scope, "name": req.name,
        "request_type": req.request_type.value, "transform_tag": req.transform_tag,
        "granularity": req.granularity.value, "chunk_size": req.chunk_size,
        "priority": req.priority, "status": req.status.value,
        "created_at": req.created_at, "updated_at": req.updated_at,
        "lifetime_seconds": req.lifetime_seconds, "metadata": req.metadata,
        "version": req.version,
        "collections": [collection_json(c) for c in collections],
    }


def collection_json(col: Collection) -> dict:
    return {
        "collection_id": col.collection_id, "request_id": col.request_id,
        "relation": col.relation.value, "scope": col.scope, "name": col.name,
        "status": col.status.value, "total": col.total_contents,
        "available": col.available_contents, "delivered": col.delivered_contents,
        "version": col.version,
    }


def content_json(c: Content) -> dict:
    return {
        "content_id": c.content_id, "collection_id": c.collection_id,
        "scope": c.scope, "name": c.name, "min_id": c.min_id, "max_id": c.max_id,
        "status": c.status.value, "size_bytes": c.size_bytes, "checksum": c.checksum,
        "locator": c.locator, "parent_content_id": c.parent_content_id,
        "version": c.version,
    }


def _error_path(err: jsonschema.ValidationError) -> str:
    path = "/".join(str(p) for p in err.absolute_path)
    if err.validator == "required":
        missing = re.match(r"'([^']+)'", err.message)
        if missing:
            path = f"{path}/{missing.group(1)}" if path else missing.group(1)
    return path or "<document>"


def _int_param(value: str, name: str) -> int:
    try:
        return int(value)
    except (TypeError, ValueError):
        raise InvalidFilter(f"{name} must be an integer, got {value!r}") from None


class ApiService:
    def __init__(self, catalog: Catalog, registry: Optional[PluginRegistry] = None):
        self.catalog = catalog
        self.registry = registry or default_registry()

    # -- requests -------------------------------------------------------------

    def document_to_request(self, doc: dict) -> Request:
        """Validate a RequestDocument and map it onto a new Request.

        Raises ``jsonschema.ValidationError`` or ``InvalidFilter``.
        """
        schemas.validate("request_document", doc)
        rtype = RequestType(doc["request_type"])
        tag = doc.get("transform_tag", _DEFAULT_TAGS.get(rtype))
        if not self.registry.has_transform(tag):
            raise InvalidFilter(f"transform_tag: no transform plugin {tag!r}")
        granularity = (Granularity.EVENT_RANGE if rtype is RequestType.EVENT_STREAM
                       else Granularity.FILE)
        return Request(
            scope=doc["scope"], name=doc["name"], request_type=rtype, transform_tag=tag,
            granularity=granularity, chunk_size=doc.get("chunk_size"),
            priority=doc.get("priority", 0),
            lifetime_seconds=doc.get("lifetime_seconds", 86400),
            metadata=doc.get("metadata", {}))

    def handle_submit(self, body: Union[bytes, str, dict]) -> ApiResponse:
        try:
            doc = json.loads(body) if isinstance(body, (bytes, str)) else body
        except ValueError as exc:
            return error(400, "invalid_request", f"body is not JSON: {exc}")
        try:
            req = self.document_to_request(doc)
        except jsonschema.ValidationError as exc:
            return error(400, "invalid_request", f"{_error_path(exc)}: {exc.message}")
        except InvalidFilter as exc:
            return error(400, "invalid_request", str(exc))
        try:
            request_id, created = self.catalog.register_request(req)
        except StorageError as exc:
            return error(500, "internal", str(exc))
        return ApiResponse(201 if created else 200, {"request_id": request_id})

    def handle_get_request(self, request_id: int) -> ApiResponse:
        try:
            req = self.catalog.get_request(request_id)
            cols = self.catalog.get_collections(request_id)
        except NotFound:
            return error(404, "not_found", f"request {request_id} not found")
        except StorageError as exc:
            return error(500, "internal", str(exc))
        return ApiResponse(200, request_json(req, cols))

    # -- catalog --------------------------------------------------------------

    def handle_query_catalog(self, what: str, query: dict) -> ApiResponse:
        """``what`` is ``"contents"`` or ``"collections"``; ``query`` maps
        parameter names to a string or a list of strings."""
        q = {k: (v[-1] if isinstance(v, list) else v) for k, v in query.items()}
        try:
            request_id = _int_param(q["request_id"], "request_id") if "request_id" in q else None
            collection_id = (_int_param(q["collection_id"], "collection_id")
                             if "collection_id" in q else None)
            if request_id is None and collection_id is None:
                raise InvalidFilter("a request_id or collection_id selector is required")
            if request_id is not None:
                self.catalog.get_request(request_id)
            if collection_id is not None:
                col = self.catalog.get_collection(collection_id)
                if request_id is not None and col.request_id != request_id:
                    return error(404, "not_found",
                                 f"collection {collection_id} is not part of request {request_id}")
            if what == "collections":
                if collection_id is not None:
                    cols = [col]
                else:
                    cols = self.catalog.get_collections(request_id)
                return ApiResponse(200, {"collections": [collection_json(c) for c in cols],
                                         "next_page_token": ""})
            if what != "contents":
                return error(404, "not_found", f"no catalog listing {what!r}")
            statuses = None
            if "status" in q:
                names = [s for v in _as_list(query["status"]) for s in v.split(",") if s]
                try:
                    statuses = [ContentStatus(s) for s in names]
                except ValueError as exc:
                    raise InvalidFilter(f"status: {exc}") from None
            page_size = _int_param(q["page_size"], "page_size") if "page_size" in q else None
            page, token = self.catalog.query_contents(
                request_id=request_id, collection_id=collection_id, statuses=statuses,
                page_token=q.get("page_token") or None, page_size=page_size,
                relation=q.get("relation"))
        except InvalidFilter as exc:
            return error(400, "invalid_request", str(exc))
        except ValueError as exc:
            return error(400, "invalid_request", str(exc))
        except NotFound as exc:
            return error(404, "not_found", f"{exc} not found")
        except StorageError as exc:
            return error(500, "internal", str(exc))
        return ApiResponse(200, {"contents": [content_json(c) for c in page],
                                 "next_page_token": token})

    # -- messages and health --------------------------------------------------

    def handle_ack(self, msg_id: int) -> ApiResponse:
        try:
            with self.catalog.transaction():
                msg = self.catalog.get_message(msg_id)
                if msg.status is MessageStatus.SENT:
                    self.catalog.mark_message(msg_id, MessageStatus.ACKED)
                elif msg.status is MessageStatus.NEW:
                    raise IllegalTransition(msg.status, MessageStatus.ACKED)
        except NotFound:
            return error(404, "not_found", f"message {msg_id} not found")
        except IllegalTransition:
            return error(409, "conflict", f"message {msg_id} has not been sent yet")
        except StorageError as exc:
            return error(500, "internal", str(exc))
        return ApiResponse(200, {"msg_id": msg_id, "status": "acked"})

    def handle_health(self) -> ApiResponse:
        try:
            self.catalog.ping()
            beats = self.catalog.heartbeats()
        except StorageError as exc:
            return error(503, "internal", f"catalog unreachable: {exc}")
        now = self.catalog.clock.now()
        return ApiResponse(200, {"status": "ok",
                                 "agents": {k: max(0.0, now - t) for k, t in beats.items()}})

    # -- routing --------------------------------------------------------------

    def dispatch(self, method: str, url: str, body: bytes = b"") -> ApiResponse:
        parts = urlsplit(url)
        path = parts.path.rstrip("/")
        query = parse_qs(parts.query, keep_blank_values=False)
        if not path.startswith(API_PREFIX):
            return error(404, "not_found", f"no route {path}")
        route = path[len(API_PREFIX):]
        try:
            if route == "/requests" and method == "POST":
                return self.handle_submit(body)
            m = re.fullmatch(r"/requests/([^/]+)", route)
            if m and method == "GET":
                return self.handle_get_request(_int_param(m.group(1), "request id"))
            m = re.fullmatch(r"/catalog/(contents|collections)", route)
            if m and method == "GET":
                return self.handle_query_catalog(m.group(1), query)
            m = re.fullmatch(r"/messages/([^/]+)/ack", route)
            if m and method == "POST":
                return self.handle_ack(_int_param(m.group(1), "message id"))
            if route == "/health" and method == "GET":
                return self.handle_health()
        except InvalidFilter as exc:
            return error(400, "invalid_request", str(exc))
        except Exception:
            logger.exception("unhandled error on %s %s", method, url)
            return error(500, "internal", "unexpected server error")
        return error(404, "not_found", f"no route {method} {path}")


def _as_list(value):
    return value if isinstance(value, list) else [value]


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    service: ApiService

    def _respond(self, method):
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        resp = self.service.dispatch(method, self.path, body)
        payload = resp.json()
        self.send_response(resp.status, HTTPStatus(resp.status).phrase)
        self.send_header("Content-Type", CONTENT_TYPE)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def do_GET(self):
        self._respond("GET")

    def do_POST(self):
        self._respond("POST")

    def log_message(self, fmt, *args):
        logger.debug("%s - %s", self.address_string(), fmt % args)


class ApiServer(ThreadingHTTPServer):
    daemon_threads = True
    request_queue_size = 128


def make_server(service: ApiService, host: str = "127.0.0.1", port: int = 8443) -> ApiServer:
    handler = type("Handler", (_Handler,), {"service": service})
    return ApiServer((host, port), handler)


def parse_bind_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)
