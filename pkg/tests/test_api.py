import json
import random
import threading
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import jsonschema
import pytest

from conftest import make_stack
from granule_dds import schemas
from granule_dds.agents import drain
from granule_dds.api import CONTENT_TYPE, ERROR_CODES, ApiService, make_server, parse_bind_addr
from granule_dds.catalog import Catalog, CatalogConfig
from granule_dds.clock import SimClock
from granule_dds.model import Message, MessageStatus, MessageType
from granule_dds.plugins.sim_tape import SimTapeConfig

GOLDEN = Path(__file__).parent / "golden"

STAGE_IN = {"scope": "sim", "name": "carousel", "request_type": "stage_in"}


def golden(name):
    return json.loads((GOLDEN / f"{name}.json").read_text())


def matches(actual, expected):
    """Structural equality where the string "<any>" matches any value."""
    if expected == "<any>":
        return True
    if isinstance(expected, dict):
        return (isinstance(actual, dict) and actual.keys() == expected.keys()
                and all(matches(actual[k], expected[k]) for k in expected))
    if isinstance(expected, list):
        return (isinstance(actual, list) and len(actual) == len(expected)
                and all(matches(a, e) for a, e in zip(actual, expected)))
    return actual == expected and type(actual) is type(expected)


def _run_to_end(stack, rid):
    for _ in range(100):
        drain(stack.agents)
        if stack.catalog.get_request(rid).status.terminal:
            return
        if not stack.ack_all_sent():
            stack.finish_staging()
    raise AssertionError("request did not finish")


# -- submit and get -------------------------------------------------------------

def test_submit_and_roundtrip(stack):
    resp = stack.api.handle_submit(json.dumps(STAGE_IN).encode())
    assert (resp.status, resp.body) == (201, {"request_id": 1})
    schemas.validate("submit_response", resp.body)
    got = stack.api.handle_get_request(1)
    assert got.status == 200
    schemas.validate("request", got.body)
    assert matches(got.body, golden("request_new"))


def test_duplicate_submit_returns_same_id(stack):
    first = stack.api.handle_submit(STAGE_IN)
    again = stack.api.handle_submit(dict(STAGE_IN))
    assert (first.status, again.status) == (201, 200)
    assert first.body == again.body


@pytest.mark.parametrize("doc,needle", [
    ({"name": "x", "request_type": "stage_in"}, "scope"),
    ({"scope": "", "name": "x", "request_type": "stage_in"}, "scope"),
    ({"scope": "s", "name": "x", "request_type": "event_stream",
      "transform_tag": "event_splitter"}, "chunk_size"),
    ({"scope": "s", "name": "x", "request_type": "stage_in", "chunk_size": 5}, "chunk_size"),
    ({"scope": "s", "name": "x", "request_type": "bulk"}, "request_type"),
    ({"scope": "s", "name": "x", "request_type": "transform", "transform_tag": "nope"},
     "transform_tag"),
])
def test_submit_validation(stack, doc, needle):
    resp = stack.api.handle_submit(doc)
    assert resp.status == 400
    assert resp.body["code"] == "invalid_request"
    assert needle in resp.body["detail"]
    schemas.validate("error", resp.body)


def test_submit_rejects_non_json(stack):
    resp = stack.api.handle_submit(b"{not json")
    assert resp.status == 400 and resp.body["code"] == "invalid_request"


def test_get_unknown_request(stack):
    resp = stack.api.handle_get_request(99)
    assert resp.status == 404
    assert resp.body == golden("error_not_found")


def test_finished_request_golden():
    stack = make_stack(SimTapeConfig(file_count=3))
    rid = stack.submit(request_type="event_stream", transform_tag="event_splitter",
                       chunk_size=400, priority=5, lifetime_seconds=3600,
                       metadata={"campaign": "reprocessing"})
    _run_to_end(stack, rid)
    body = stack.api.handle_get_request(rid).body
    schemas.validate("request", body)
    assert matches(body, golden("request_finished")), body


# -- catalog queries ------------------------------------------------------------

def test_query_filters_and_pages():
    stack = make_stack(SimTapeConfig(file_count=5, staging_slots=1))
    rid = stack.submit()
    drain(stack.agents)
    stack.clock.advance_to(stack.sim.next_event_time())
    stack.sim.advance_to(stack.clock.now())
    drain(stack.agents)
    api = stack.api
    resp = api.handle_query_catalog("contents", {"request_id": str(rid), "status": "staging"})
    schemas.validate("contents_page", resp.body)
    assert [c["status"] for c in resp.body["contents"]] == ["staging"] * 4
    resp = api.handle_query_catalog("contents", {"request_id": [str(rid)],
                                                 "status": ["delivering,staging"]})
    assert len(resp.body["contents"]) == 6  # 4 inputs staging, 1 input and 1 output delivering
    seen, token = [], ""
    while True:
        page = api.dispatch("GET", f"/api/v1/catalog/contents?request_id={rid}"
                                   f"&page_size=2&page_token={token}").body
        schemas.validate("contents_page", page)
        assert len(page["contents"]) <= 2
        seen += [c["content_id"] for c in page["contents"]]
        token = page["next_page_token"]
        if not token:
            break
    assert seen == sorted(set(seen)) and len(seen) == 6
    cols = api.handle_query_catalog("collections", {"request_id": str(rid)})
    schemas.validate("collections_page", cols.body)
    assert [c["relation"] for c in cols.body["collections"]] == ["input", "output"]
    assert cols.body["collections"][0]["total"] == 5


@pytest.mark.parametrize("what,query,status", [
    ("contents", {}, 400),
    ("collections", {}, 400),
    ("contents", {"request_id": "77"}, 404),
    ("contents", {"request_id": "abc"}, 400),
    ("contents", {"request_id": "1", "status": "bogus"}, 400),
    ("contents", {"request_id": "1", "page_size": "0"}, 400),
    ("contents", {"request_id": "1", "page_token": "garbage"}, 400),
    ("contents", {"collection_id": "55"}, 404),
])
def test_query_errors(stack, what, query, status):
    stack.submit()
    resp = stack.api.handle_query_catalog(what, query)
    assert resp.status == status, resp.body
    schemas.validate("error", resp.body)


# -- acks and health ------------------------------------------------------------

def _message(catalog, status):
    key = f"k{len(catalog.messages())}"
    msg_id = catalog.record_message(Message(1, MessageType.REQUEST_FINISHED, key))
    if status is not MessageStatus.NEW:
        catalog.mark_message(msg_id, MessageStatus.SENT)
    return msg_id


def test_ack_contract(stack):
    stack.submit()
    sent = _message(stack.catalog, MessageStatus.SENT)
    first = stack.api.handle_ack(sent)
    assert (first.status, first.body) == (200, golden("ack"))
    schemas.validate("ack_response", first.body)
    before = stack.catalog.fingerprint()
    assert stack.api.handle_ack(sent).status == 200
    assert stack.catalog.fingerprint() == before
    assert stack.api.handle_ack(999).status == 404
    new = _message(stack.catalog, MessageStatus.NEW)
    resp = stack.api.handle_ack(new)
    assert resp.status == 409 and resp.body["code"] == "conflict"
    assert stack.catalog.get_message(new).status is MessageStatus.NEW


def test_health():
    clock = SimClock(0.0)
    catalog = Catalog(CatalogConfig(), clock)
    api = ApiService(catalog)
    catalog.heartbeat("conductor", "cd-1")
    clock.advance(300)
    catalog.heartbeat("transporter", "tp-1")
    catalog.heartbeat("transformer", "tf-1")
    resp = api.handle_health()
    schemas.validate("health", resp.body)
    assert resp.status == 200 and resp.body == golden("health")
    assert resp.body["agents"]["conductor"] >= 300
    catalog.close()
    down = api.handle_health()
    assert down.status == 503
    schemas.validate("error", down.body)


def test_unknown_routes(stack):
    assert stack.api.dispatch("GET", "/api/v2/requests/1").status == 404
    assert stack.api.dispatch("DELETE", "/api/v1/requests/1").status == 404
    assert stack.api.dispatch("GET", "/api/v1/requests/abc").status == 400


def test_every_error_uses_published_code(stack):
    for resp in (stack.api.handle_get_request(5), stack.api.handle_submit(b"x"),
                 stack.api.handle_ack(3), stack.api.handle_query_catalog("contents", {})):
        assert resp.body["code"] in ERROR_CODES


# -- retry storms ---------------------------------------------------------------

def test_retry_storm_matches_single_calls():
    """Doubling every call in a random script ends in the same catalog state."""
    for seed in range(30):
        rng = random.Random(seed)
        script = []
        for _ in range(12):
            kind = rng.choice(["submit", "get", "query", "ack"])
            arg = rng.randrange(1, 5)
            script.append((kind, arg))
        states = []
        for repeat in (1, 2, 3):
            stack = make_stack()
            ids = [_message(stack.catalog, MessageStatus.SENT) for _ in range(3)]
            for kind, arg in script:
                for _ in range(repeat if rng.random() < 0.8 else 1):
                    if kind == "submit":
                        stack.api.handle_submit({**STAGE_IN, "name": f"ds{arg}"})
                    elif kind == "get":
                        stack.api.handle_get_request(arg)
                    elif kind == "query":
                        stack.api.handle_query_catalog("contents", {"request_id": str(arg)})
                    else:
                        stack.api.handle_ack(ids[arg % 3])
            states.append(stack.catalog.fingerprint())
        assert len(set(states)) == 1, seed


# -- over a socket --------------------------------------------------------------

@pytest.fixture
def server(stack):
    srv = make_server(stack.api, "127.0.0.1", 0)
    th = threading.Thread(target=srv.serve_forever, args=(0.05,), daemon=True)
    th.start()
    yield f"http://127.0.0.1:{srv.server_address[1]}", stack
    srv.shutdown()
    srv.server_close()


def _call(url, data=None):
    req = urllib.request.Request(url, data=data, method="POST" if data is not None else "GET")
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status, resp.headers["Content-Type"], json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, exc.headers["Content-Type"], json.loads(exc.read())


def test_http_roundtrip(server):
    base, _ = server
    status, ctype, body = _call(f"{base}/api/v1/requests", json.dumps(STAGE_IN).encode())
    assert (status, ctype, body) == (201, CONTENT_TYPE, {"request_id": 1})
    status, ctype, body = _call(f"{base}/api/v1/requests/1")
    assert status == 200 and ctype == "application/json; charset=utf-8"
    assert matches(body, golden("request_new"))
    status, ctype, body = _call(f"{base}/api/v1/requests/99")
    assert (status, ctype) == (404, CONTENT_TYPE) and body["code"] == "not_found"
    status, _, body = _call(f"{base}/api/v1/health")
    assert status == 200 and body["status"] == "ok"


def test_64_concurrent_connections(server):
    base, stack = server
    barrier = threading.Barrier(64)

    def one(i):
        barrier.wait(timeout=10)
        doc = {**STAGE_IN, "name": f"ds{i % 16}"}
        status, ctype, body = _call(f"{base}/api/v1/requests", json.dumps(doc).encode())
        return status, ctype, body["request_id"]

    with ThreadPoolExecutor(64) as pool:
        results = list(pool.map(one, range(64)))
    assert all(ctype == CONTENT_TYPE for _, ctype, _ in results)
    by_name = {}
    for i, (status, _, rid) in enumerate(results):
        assert status in (200, 201)
        by_name.setdefault(i % 16, set()).add(rid)
    assert all(len(ids) == 1 for ids in by_name.values())
    assert sum(1 for s, _, _ in results if s == 201) == 16
    assert len({next(iter(v)) for v in by_name.values()}) == 16


def test_schema_rejects_bad_shapes():
    with pytest.raises(jsonschema.ValidationError):
        schemas.validate("error", {"code": "teapot", "detail": "x"})
    with pytest.raises(jsonschema.ValidationError):
        schemas.validate("submit_response", {"request_id": "1"})


def test_parse_bind_addr():
    assert parse_bind_addr("127.0.0.1:8443") == ("127.0.0.1", 8443)
    assert parse_bind_addr(":9000") == ("127.0.0.1", 9000)
