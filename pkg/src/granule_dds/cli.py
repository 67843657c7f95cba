"""Command line entry point: ``granule-dds <command> ...``.

Exit status is 0 on success, 1 for user errors (bad flags, bad input files,
4xx answers) and 2 for internal errors. Errors go to stderr as one JSON
object with the same ``code``/``detail`` shape the REST API uses.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import queue
import signal
import sys
import threading
import time
import urllib.error
import urllib.parse
import urllib.request

from granule_dds import schemas
from granule_dds.errors import (
    GranuleError, InvalidArgument, InvalidFilter, MismatchedScenarios, NotFound,
    ScenarioFailed, UnknownPlugin,
)

logger = logging.getLogger("granule_dds.cli")

USER_ERRORS = (InvalidArgument, InvalidFilter, NotFound, UnknownPlugin, ScenarioFailed,
               MismatchedScenarios)


class UserError(Exception):
    """Raised by command handlers for problems the caller can fix."""

    def __init__(self, detail, code="invalid_request", extra=None):
        super().__init__(detail)
        self.code = code
        self.extra = extra or {}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(message, extra={"usage": self.format_usage().strip()})


def _emit_error(code: str, detail: str, **extra) -> None:
    print(json.dumps({"code": code, "detail": detail, **extra}), file=sys.stderr)


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=False))


def _read_json(path):
    try:
        if path == "-":
            return json.load(sys.stdin)
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, ValueError) as exc:
        raise UserError(f"cannot read JSON from {path}: {exc}") from exc


# -- HTTP client commands -----------------------------------------------------

def _http(method: str, url: str, body=None):
    data = json.dumps(body).encode("utf-8") if body is not None else None
    req = urllib.request.Request(url, data=data, method=method,
                                 headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=30) as resp:
            return resp.status, json.loads(resp.read() or b"{}")
    except urllib.error.HTTPError as exc:
        try:
            payload = json.loads(exc.read() or b"{}")
        except ValueError:
            payload = {"code": "internal", "detail": f"HTTP {exc.code}"}
        return exc.code, payload
    except (urllib.error.URLError, OSError) as exc:
        raise ConnectionError(f"cannot reach {url}: {exc}") from exc


def _answer(status: int, payload: dict) -> int:
    if status < 400:
        _print_json(payload)
        return 0
    print(json.dumps(payload), file=sys.stderr)
    return 1 if status < 500 else 2


def cmd_request_submit(args) -> int:
    return _answer(*_http("POST", f"{args.url}/api/v1/requests", _read_json(args.document)))


def cmd_request_status(args) -> int:
    rid = urllib.parse.quote(str(args.request_id), safe="")
    return _answer(*_http("GET", f"{args.url}/api/v1/requests/{rid}"))


def cmd_catalog(args) -> int:
    query = {}
    for key in ("request_id", "collection_id", "status", "page_token", "page_size", "relation"):
        value = getattr(args, key, None)
        if value is not None:
            query[key] = value
    qs = urllib.parse.urlencode(query)
    return _answer(*_http("GET", f"{args.url}/api/v1/catalog/{args.what}?{qs}"))


# -- simulation commands ------------------------------------------------------

def _scenario_config(args):
    from granule_dds.harness import ScenarioConfig
    from granule_dds.plugins.sim_tape import SimTapeConfig

    sim = (SimTapeConfig.from_dict(_read_json(args.sim_config)) if args.sim_config
           else SimTapeConfig())
    return ScenarioConfig(
        sim=sim, mode=args.mode, consumer_processing_seconds=args.processing_seconds,
        consumer_ack_latency_seconds=args.ack_latency_seconds,
        transform_tag=args.transform_tag, chunk_size=args.chunk_size,
        batch_limit=args.batch_limit)


def cmd_sim_run(args) -> int:
    from granule_dds.harness import oracle_simulate, run_scenario

    config = _scenario_config(args)
    report = (oracle_simulate if args.oracle else run_scenario)(config)
    data = report.to_dict()
    schemas.validate("sim_report", data)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(data, fh, indent=2)
            fh.write("\n")
    _print_json({k: v for k, v in data.items() if k != "per_content_latency"})
    return 0


def cmd_sim_compare(args) -> int:
    from granule_dds.harness import Mode, SimReport, compare

    reports = []
    for path in (args.a, args.b):
        data = _read_json(path)
        try:
            schemas.validate("sim_report", data)
        except Exception as exc:
            raise UserError(f"{path} is not a SimReport: {exc}") from exc
        reports.append(SimReport.from_dict(data))
    by_mode = {r.mode: r for r in reports}
    if set(by_mode) != {Mode.FINE, Mode.COARSE}:
        raise UserError("need one fine and one coarse report")
    _print_json(compare(by_mode[Mode.FINE], by_mode[Mode.COARSE]).to_dict())
    return 0


# -- store and service commands -----------------------------------------------

def cmd_db_audit(args) -> int:
    from granule_dds.catalog import Catalog, CatalogConfig

    if not os.path.exists(args.db):
        raise UserError(f"no catalog at {args.db}", code="not_found")
    catalog = Catalog(CatalogConfig(storage_path=args.db))
    try:
        mismatches = catalog.audit_counters()
        _print_json({"fingerprint": catalog.fingerprint(),
                     "counter_mismatches": mismatches,
                     "snapshot": catalog.snapshot()})
    finally:
        catalog.close()
    return 2 if mismatches else 0


class WallConsumer:
    """Background consumer for ``serve --consumer sim``.

    Sleeps ``processing`` seconds per content and ``ack_latency`` per
    message, then acks through the service. A message is only acked once
    the conductor has marked it sent, so early attempts are retried.
    """

    def __init__(self, api, processing: float, ack_latency: float):
        self.api = api
        self.processing = processing
        self.ack_latency = ack_latency
        self.inbox: queue.Queue = queue.Queue()
        self.seen: set[str] = set()

    def on_message(self, message, payload):
        from granule_dds.model import MessageType

        if message.msg_type is MessageType.CONTENT_AVAILABLE and message.dedup_key not in self.seen:
            self.seen.add(message.dedup_key)
            self.inbox.put((message.msg_id, len(payload["contents"])))

    def run(self, stop: threading.Event) -> None:
        while not stop.is_set():
            try:
                msg_id, n = self.inbox.get(timeout=0.2)
            except queue.Empty:
                continue
            stop.wait(self.processing * n + self.ack_latency)
            while not stop.is_set() and self.api.handle_ack(msg_id).status == 409:
                stop.wait(0.05)


def cmd_serve(args) -> int:
    from granule_dds.agents import AgentKind, Conductor, Transformer, Transporter, run_daemon
    from granule_dds.api import ApiService, make_server, parse_bind_addr
    from granule_dds.catalog import Catalog, CatalogConfig
    from granule_dds.clock import WallClock
    from granule_dds.config import Settings
    from granule_dds.plugins import CallbackNotifier, FileQueueNotifier, default_registry
    from granule_dds.plugins.sim_tape import SimTape, SimTapeConfig

    settings = Settings.load(args.config)
    clock = WallClock()
    catalog = Catalog(CatalogConfig(
        storage_path=args.db or settings["catalog.storage_path"],
        lease_seconds_default=int(settings["catalog.lease_seconds_default"]),
        page_size_max=int(settings["http.page_size_max"])), clock)
    registry = default_registry()
    api = ApiService(catalog, registry)
    sim_cfg = (SimTapeConfig.from_dict(_read_json(args.sim_config)) if args.sim_config
               else SimTapeConfig())
    ddm = SimTape(sim_cfg, clock)

    stop = threading.Event()
    threads = []
    if args.consumer == "sim":
        consumer = WallConsumer(api, args.processing_seconds, args.ack_latency_seconds)
        notifier = CallbackNotifier(catalog, consumer.on_message)
        threads.append(threading.Thread(target=consumer.run, args=(stop,), daemon=True))
    else:
        notifier = FileQueueNotifier(catalog, args.messages_log)
    agents = [
        Transporter(catalog, ddm, settings.agent_config(AgentKind.TRANSPORTER)),
        Transformer(catalog, registry, settings.agent_config(AgentKind.TRANSFORMER)),
        Conductor(catalog, ddm, notifier, settings.agent_config(AgentKind.CONDUCTOR)),
    ]
    threads += [threading.Thread(target=run_daemon, args=(a, stop), daemon=True,
                                 name=a.config.agent_id) for a in agents]

    host, port = parse_bind_addr(args.bind or settings["http.bind_addr"])
    server = make_server(api, host, port)
    http_thread = threading.Thread(target=server.serve_forever, daemon=True)
    for t in threads + [http_thread]:
        t.start()
    bound = server.server_address
    print(json.dumps({"listening": f"http://{bound[0]}:{bound[1]}"}), flush=True)

    def _stop(signum, frame):
        stop.set()

    signal.signal(signal.SIGTERM, _stop)
    signal.signal(signal.SIGINT, _stop)
    deadline = time.monotonic() + args.duration if args.duration else None
    while not stop.is_set():
        if deadline is not None and time.monotonic() >= deadline:
            stop.set()
        stop.wait(0.1)
    server.shutdown()
    server.server_close()
    for t in threads:
        t.join(timeout=5)
    catalog.close()
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="granule-dds", description="Fine-grained data delivery service tools.")
    p.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    serve = sub.add_parser("serve", help="run the REST service and all agents")
    serve.add_argument("--config", help="JSON settings file")
    serve.add_argument("--bind", help="host:port, overrides http.bind_addr")
    serve.add_argument("--db", help="catalog file, overrides catalog.storage_path")
    serve.add_argument("--sim-config", help="SimTapeConfig JSON for the simulated tape")
    serve.add_argument("--messages-log", default="messages.log")
    serve.add_argument("--consumer", choices=("sim", "external"), default="external")
    serve.add_argument("--processing-seconds", type=float, default=0.0)
    serve.add_argument("--ack-latency-seconds", type=float, default=0.0)
    serve.add_argument("--duration", type=float, help="stop after this many seconds")
    serve.set_defaults(func=cmd_serve)

    url_kw = dict(default="http://127.0.0.1:8443", help="service base URL")

    request = sub.add_parser("request", help="submit or inspect requests")
    rsub = request.add_subparsers(dest="action", required=True, parser_class=_Parser)
    submit = rsub.add_parser("submit", help="POST a request document (file or -)")
    submit.add_argument("document")
    submit.add_argument("--url", **url_kw)
    submit.set_defaults(func=cmd_request_submit)
    status = rsub.add_parser("status", help="show one request")
    status.add_argument("request_id")
    status.add_argument("--url", **url_kw)
    status.set_defaults(func=cmd_request_status)

    catalog = sub.add_parser("catalog", help="browse collections and contents")
    csub = catalog.add_subparsers(dest="what", required=True, parser_class=_Parser)
    for what in ("contents", "collections"):
        c = csub.add_parser(what)
        c.add_argument("--url", **url_kw)
        c.add_argument("--request-id", dest="request_id")
        c.add_argument("--collection-id", dest="collection_id")
        if what == "contents":
            c.add_argument("--status", help="comma separated content statuses")
            c.add_argument("--relation", choices=("input", "output"))
            c.add_argument("--page-size", dest="page_size")
            c.add_argument("--page-token", dest="page_token")
        c.set_defaults(func=cmd_catalog)

    sim = sub.add_parser("sim", help="carousel simulations")
    ssub = sim.add_subparsers(dest="action", required=True, parser_class=_Parser)
    run = ssub.add_parser("run", help="run one scenario and write its SimReport")
    run.add_argument("--mode", choices=("fine", "coarse"), required=True)
    run.add_argument("--sim-config", help="SimTapeConfig JSON")
    run.add_argument("--report", help="write the SimReport JSON here")
    run.add_argument("--processing-seconds", type=float, default=0.0)
    run.add_argument("--ack-latency-seconds", type=float, default=0.0)
    run.add_argument("--transform-tag", default="passthrough")
    run.add_argument("--chunk-size", type=int)
    run.add_argument("--batch-limit", type=int, default=50)
    run.add_argument("--oracle", action="store_true",
                     help="use the reference event simulation instead of the service stack")
    run.set_defaults(func=cmd_sim_run)
    cmp_ = ssub.add_parser("compare", help="summarize a fine and a coarse report")
    cmp_.add_argument("a")
    cmp_.add_argument("b")
    cmp_.set_defaults(func=cmd_sim_compare)

    db = sub.add_parser("db", help="catalog maintenance")
    dsub = db.add_subparsers(dest="action", required=True, parser_class=_Parser)
    audit = dsub.add_parser("audit", help="dump a JSON snapshot and check counters")
    audit.add_argument("--db", required=True)
    audit.set_defaults(func=cmd_db_audit)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UserError as exc:
        _emit_error(exc.code, str(exc), **exc.extra)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UserError as exc:
        _emit_error(exc.code, str(exc), **exc.extra)
        return 1
    except NotFound as exc:
        _emit_error("not_found", str(exc))
        return 1
    except USER_ERRORS as exc:
        _emit_error("invalid_request", str(exc))
        return 1
    except ConnectionError as exc:
        _emit_error("internal", str(exc))
        return 2
    except GranuleError as exc:
        _emit_error("internal", str(exc))
        return 2
    except Exception as exc:
        logger.debug("unexpected error", exc_info=True)
        _emit_error("internal", f"{type(exc).__name__}: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
