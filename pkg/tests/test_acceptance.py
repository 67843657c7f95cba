"""Acceptance criteria, one test and one PASS/FAIL line each.

Expected values come from the independent oracle (harness.oracle) or from
closed forms computed here, never from the implementation under test.
"""

import heapq
import itertools
import math
import random
import time

import pytest

from acceptance_log import record
from conftest import make_stack
from faults import crash_trial, idempotency_run
from granule_dds import schemas
from granule_dds.cache_policy import UsageState, compute_lifetime, record_access
from granule_dds.errors import IllegalTransition
from granule_dds.harness import (
    Mode, ScenarioConfig, compare, oracle_simulate, run_fine, run_scenario,
)
from granule_dds.model import (
    ContentEvent, ContentStatus, Message, MessageStatus, MessageType, RequestEvent,
    RequestStatus, next_content_status, next_request_status, split_event_ranges,
)
from granule_dds.plugins.sim_tape import GB, SimTapeConfig
from granule_dds.plugins.transforms import EventRangeSplitter
from interleavings import run_schedules
from scenarios import random_config
from test_api import STAGE_IN, _run_to_end, golden, matches
from test_model import EXPECTED_CONTENT, EXPECTED_REQUEST
from test_plugins import _file

FILES, SLOTS, BASE = 100, 4, 10.0
CAROUSEL = SimTapeConfig(file_count=FILES, file_size_bytes=GB, staging_slots=SLOTS,
                         staging_seconds_base=BASE, staging_seconds_jitter=0.0,
                         disk_pool_capacity_bytes=FILES * GB)


def _carousel(mode):
    return ScenarioConfig(sim=CAROUSEL, mode=mode, consumer_processing_seconds=1.0,
                          consumer_ack_latency_seconds=0.0)


@pytest.fixture(scope="module")
def carousel():
    t0 = time.perf_counter()
    fine_run = run_fine(_carousel(Mode.FINE))
    coarse = run_scenario(_carousel(Mode.COARSE))
    elapsed = time.perf_counter() - t0
    oracle = {m: oracle_simulate(_carousel(m)) for m in Mode}
    return fine_run, coarse, oracle, elapsed


def _fifo_completions():
    """Staging completion times for equal-duration files on FIFO slots."""
    free = [0.0] * SLOTS
    done = []
    for _ in range(FILES):
        start = heapq.heappop(free)
        done.append(start + BASE)
        heapq.heappush(free, start + BASE)
    return sorted(done)


def test_pool_usage_reduction(carousel):
    fine_run, coarse, oracle, elapsed = carousel
    fine = fine_run.report
    reduction = compare(fine, coarse).pool_reduction_fraction
    record("pool-usage reduction", {
        "fine peak <= 5 GB": fine.peak_pool_bytes <= 5 * GB,
        "coarse peak == 100 GB": coarse.peak_pool_bytes == 100 * GB,
        "reduction >= 0.95": reduction >= 0.95,
        "fine == oracle": fine == oracle[Mode.FINE],
        "coarse == oracle": coarse == oracle[Mode.COARSE],
        "runtime < 5 s": elapsed < 5.0,
    }, f"fine peak {fine.peak_pool_bytes / GB:g} GB, coarse peak "
       f"{coarse.peak_pool_bytes / GB:g} GB, reduction {reduction:.3f}, runtime {elapsed:.2f} s")


def test_speed_up(carousel):
    fine_run, coarse, oracle, _ = carousel
    fine = fine_run.report
    completions = _fifo_completions()
    record("speed-up", {
        "fine ttfd == first staging completion":
            fine.time_to_first_delivery_seconds == completions[0],
        "coarse ttfd == 100th staging completion":
            coarse.time_to_first_delivery_seconds == completions[FILES - 1],
        "fine makespan < coarse makespan": fine.makespan_seconds < coarse.makespan_seconds,
        "fine == oracle": fine == oracle[Mode.FINE],
        "coarse == oracle": coarse == oracle[Mode.COARSE],
    }, f"ttfd fine {fine.time_to_first_delivery_seconds:g} s vs coarse "
       f"{coarse.time_to_first_delivery_seconds:g} s, makespan fine "
       f"{fine.makespan_seconds:g} s vs coarse {coarse.makespan_seconds:g} s")


@pytest.fixture(scope="module")
def sweep():
    """Seeds 1-50 in both modes; fine runs keep their catalog for the audit."""
    t0 = time.perf_counter()
    mismatches, audits = [], {}
    for seed in range(1, 51):
        cfg = random_config(seed, Mode.FINE)
        run = run_fine(cfg)
        if run.report != oracle_simulate(cfg):
            mismatches.append(f"fine/{seed}")
        audits[seed] = run.catalog.audit_counters()
        run.catalog.close()
        cfg = random_config(seed, Mode.COARSE)
        if run_scenario(cfg) != oracle_simulate(cfg):
            mismatches.append(f"coarse/{seed}")
    return mismatches, audits, time.perf_counter() - t0


def test_oracle_equivalence(sweep):
    mismatches, _, elapsed = sweep
    record("oracle equivalence", {
        "all 100 runs equal the oracle": not mismatches,
        "runtime < 30 s": elapsed < 30.0,
    }, f"seeds 1-50 x fine/coarse, {len(mismatches)} mismatches {mismatches[:5]}, "
       f"runtime {elapsed:.1f} s")


def test_state_machine_soundness():
    def table_ok(step, states, events, expected):
        for state, event in itertools.product(states, events):
            try:
                got = step(state, event)
            except IllegalTransition:
                got = None
            if got is not expected.get((state, event)):
                return False
        return True

    results = run_schedules(range(1000))
    bad = [r.seed for r in results if not r.ok]
    record("state-machine soundness", {
        "request table exhaustive":
            table_ok(next_request_status, RequestStatus, RequestEvent, EXPECTED_REQUEST),
        "content table exhaustive":
            table_ok(next_content_status, ContentStatus, ContentEvent, EXPECTED_CONTENT),
        "1000 interleavings Finished, Released, legal": len(results) == 1000 and not bad,
    }, f"{len(results)} interleavings over 20 files, {len(bad)} bad {bad[:5]}")


def test_exactly_once_effective_delivery():
    results = [crash_trial(trial) for trial in range(100)]
    crashes = sum(n for n, _ in results)
    problems = [p for _, ps in results for p in ps]
    record("exactly-once effective delivery", {
        ">= 100 trials": len(results) >= 100,
        "crashes injected": crashes > 0,
        "each output in exactly one acked message": not problems,
    }, f"{len(results)} trials, {crashes} injected crashes, {len(problems)} problems "
       f"{problems[:3]}")


def test_idempotency():
    results = [idempotency_run(seed) for seed in range(20)]
    checkpoints = sum(n for n, _ in results)
    problems = [p for _, ps in results for p in ps]
    record("idempotency", {
        "no cycle changes a quiesced catalog": not problems,
    }, f"20 runs, {checkpoints} quiesced checkpoints x 3 agents, {len(problems)} problems "
       f"{problems[:3]}")


def test_counter_audit(carousel, sweep):
    fine_run = carousel[0]
    _, audits, _ = sweep
    audits = {"carousel": fine_run.catalog.audit_counters(), **audits}
    bad = {k: v for k, v in audits.items() if v}
    record("counter audit", {
        "stored counters equal recomputation": not bad,
    }, f"{len(audits)} fine scenarios audited, {len(bad)} with mismatches")


def test_rest_contract():
    checks = {}
    stack = make_stack(SimTapeConfig(file_count=3))
    doc = {**STAGE_IN, "request_type": "event_stream", "transform_tag": "event_splitter",
           "chunk_size": 400, "priority": 5, "lifetime_seconds": 3600,
           "metadata": {"campaign": "reprocessing"}}
    schemas.validate("request_document", doc)
    first = stack.api.handle_submit(doc)
    again = stack.api.handle_submit(dict(doc))
    schemas.validate("submit_response", first.body)
    checks["duplicate submit returns same id"] = (
        (first.status, again.status) == (201, 200) and first.body == again.body)
    rid = first.body["request_id"]
    got = stack.api.handle_get_request(rid)
    schemas.validate("request", got.body)
    checks["submit -> query roundtrip"] = (
        got.status == 200 and all(got.body[k] == v for k, v in doc.items()))

    _run_to_end(stack, rid)
    finished = stack.api.handle_get_request(rid).body
    schemas.validate("request", finished)
    contents = stack.api.handle_query_catalog("contents", {"request_id": str(rid)})
    schemas.validate("contents_page", contents.body)
    collections = stack.api.handle_query_catalog("collections", {"request_id": str(rid)})
    schemas.validate("collections_page", collections.body)
    missing = stack.api.handle_get_request(99)
    schemas.validate("error", missing.body)
    health = stack.api.handle_health()
    schemas.validate("health", health.body)
    checks["golden bodies"] = (matches(finished, golden("request_finished"))
                               and missing.body == golden("error_not_found"))

    key = "contract-ack"
    msg_id = stack.catalog.record_message(Message(rid, MessageType.REQUEST_FINISHED, key))
    stack.catalog.mark_message(msg_id, MessageStatus.SENT)
    ack = stack.api.handle_ack(msg_id)
    schemas.validate("ack_response", ack.body)
    before = stack.catalog.fingerprint()
    repeat = stack.api.handle_ack(msg_id)
    checks["ack idempotent"] = (ack.status == repeat.status == 200 and ack.body == repeat.body
                                and stack.catalog.fingerprint() == before)
    checks["ack golden"] = ack.body == {**golden("ack"), "msg_id": msg_id}
    # reaching here means every jsonschema validation above passed
    checks["schema validations"] = True
    record("REST contract", checks,
           f"request {rid} submitted, queried, finished, acked; 9 bodies schema-checked")


def test_split_properties():
    rng = random.Random(2024)
    split_bad = splitter_bad = 0
    for _ in range(3000):
        n, k = rng.randint(1, 1000), rng.randint(1, 1000)
        ranges = split_event_ranges(n, k)
        covered = [i for lo, hi in ranges for i in range(lo, hi + 1)]
        if covered != list(range(n)) or len(ranges) != math.ceil(n / k):
            split_bad += 1
        if n < 2:
            continue  # a one-event file reads as "count unknown"
        size = rng.randint(0, 10**12)
        out = EventRangeSplitter().transform(_file(max_id=n - 1, size_bytes=size),
                                             {"chunk_size": k})
        got = [i for o in out for i in range(o.min_id, o.max_id + 1)]
        rounding_ok = all(abs(o.size_bytes - size * (o.max_id - o.min_id + 1) / n) <= 0.5
                          for o in out)
        if (got != list(range(n)) or not rounding_ok
                or abs(sum(o.size_bytes for o in out) - size) > len(out)):
            splitter_bad += 1
    record("split properties", {
        "split_event_ranges coverage and disjointness": split_bad == 0,
        "event_splitter coverage and size conservation": splitter_bad == 0,
    }, f"3000 random (n, k) <= 1000, {split_bad} + {splitter_bad} violations")


def test_cache_policy_properties():
    rng = random.Random(77)
    shorter = longer = out_of_bounds = 0
    for _ in range(3000):
        times = sorted(rng.uniform(0, 1e7) for _ in range(rng.randint(0, 30)))
        params = dict(alpha=rng.uniform(0, 10), lambda_decay=10 ** rng.uniform(-8, -2))
        state = UsageState("k", tuple(times), **params)
        last = times[-1] if times else 0.0
        now = last + rng.uniform(0, 1e7)
        life = compute_lifetime(state, now)
        if compute_lifetime(record_access(state, rng.uniform(last, now)), now) < life:
            shorter += 1
        if compute_lifetime(state, now + rng.uniform(0, 1e7)) > life:
            longer += 1
        if not state.min_lifetime_seconds <= life <= state.max_lifetime_seconds:
            out_of_bounds += 1
    record("cache policy monotonicity and bounds", {
        "an access never shortens the lifetime": shorter == 0,
        "waiting never lengthens the lifetime": longer == 0,
        "lifetime within [min, max]": out_of_bounds == 0,
    }, f"3000 random histories, {shorter + longer + out_of_bounds} violations")
