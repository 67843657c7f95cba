import json
import os
import signal
import subprocess
import sys
import threading
import time
import urllib.request

import pytest

from granule_dds import schemas
from granule_dds.api import make_server
from granule_dds.catalog import Catalog, CatalogConfig
from granule_dds.cli import main
from granule_dds.plugins.sim_tape import SimTapeConfig


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def one_error(err):
    lines = [ln for ln in err.splitlines() if ln.strip()]
    assert len(lines) == 1, err
    body = json.loads(lines[0])
    assert {"code", "detail"} <= set(body)
    return body


@pytest.fixture
def sim_config(tmp_path):
    path = tmp_path / "sim.json"
    path.write_text(json.dumps({"seed": 4, "file_count": 6, "staging_slots": 2}))
    return str(path)


# -- sim ------------------------------------------------------------------------

def test_sim_run_and_compare(capsys, tmp_path, sim_config):
    fine, coarse = tmp_path / "fine.json", tmp_path / "coarse.json"
    code, out, _ = run(capsys, "sim", "run", "--mode", "coarse", "--sim-config", sim_config,
                       "--report", str(coarse), "--processing-seconds", "1")
    assert code == 0
    data = json.loads(coarse.read_text())
    schemas.validate("sim_report", data)
    assert data["mode"] == "coarse" and data["peak_pool_bytes"] == 6 * 10**9
    assert json.loads(out)["seed"] == 4
    assert run(capsys, "sim", "run", "--mode", "fine", "--sim-config", sim_config,
               "--report", str(fine), "--processing-seconds", "1")[0] == 0
    code, out, _ = run(capsys, "sim", "compare", str(fine), str(coarse))
    assert code == 0
    summary = json.loads(out)
    assert summary["pool_reduction_fraction"] == pytest.approx(1 - 2 / 6)
    assert summary["ttfd_ratio"] < 1


def test_sim_run_oracle_matches(capsys, tmp_path, sim_config):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for path, extra in ((a, []), (b, ["--oracle"])):
        assert run(capsys, "sim", "run", "--mode", "fine", "--sim-config", sim_config,
                   "--report", str(path), "--processing-seconds", "2", *extra)[0] == 0
    assert json.loads(a.read_text()) == json.loads(b.read_text())


def test_sim_compare_needs_both_modes(capsys, tmp_path, sim_config):
    path = tmp_path / "fine.json"
    run(capsys, "sim", "run", "--mode", "fine", "--sim-config", sim_config, "--report", str(path))
    code, _, err = run(capsys, "sim", "compare", str(path), str(path))
    assert code == 1 and one_error(err)["code"] == "invalid_request"
    (tmp_path / "junk.json").write_text("{}")
    code, _, err = run(capsys, "sim", "compare", str(path), str(tmp_path / "junk.json"))
    assert code == 1
    one_error(err)


def test_bad_sim_config_is_user_error(capsys, tmp_path):
    path = tmp_path / "sim.json"
    path.write_text(json.dumps({"file_count": 0}))
    code, _, err = run(capsys, "sim", "run", "--mode", "fine", "--sim-config", str(path))
    assert code == 1
    one_error(err)
    code, _, err = run(capsys, "sim", "run", "--mode", "fine", "--sim-config", "/no/such.json")
    assert code == 1
    one_error(err)


# -- usage ----------------------------------------------------------------------

def test_unknown_subcommand(capsys):
    code, out, err = run(capsys, "frobnicate")
    assert code == 1 and out == ""
    body = one_error(err)
    assert body["code"] == "invalid_request" and "usage" in body


def test_missing_required_flag(capsys):
    code, _, err = run(capsys, "sim", "run")
    assert code == 1
    assert "--mode" in one_error(err)["detail"]


# -- client commands against a live server --------------------------------------

@pytest.fixture
def live(stack):
    srv = make_server(stack.api, "127.0.0.1", 0)
    th = threading.Thread(target=srv.serve_forever, args=(0.05,), daemon=True)
    th.start()
    yield f"http://127.0.0.1:{srv.server_address[1]}", stack
    srv.shutdown()
    srv.server_close()


def test_request_commands(capsys, live, tmp_path):
    url, stack = live
    doc = tmp_path / "req.json"
    doc.write_text(json.dumps({"scope": "sim", "name": "carousel", "request_type": "stage_in"}))
    code, out, _ = run(capsys, "request", "submit", str(doc), "--url", url)
    assert code == 0 and json.loads(out) == {"request_id": 1}
    code, out, _ = run(capsys, "request", "status", "1", "--url", url)
    assert code == 0 and json.loads(out)["status"] == "new"
    code, out, err = run(capsys, "request", "status", "42", "--url", url)
    assert code == 1 and out == ""
    assert one_error(err)["code"] == "not_found"
    doc.write_text(json.dumps({"name": "carousel", "request_type": "stage_in"}))
    code, _, err = run(capsys, "request", "submit", str(doc), "--url", url)
    assert code == 1 and "scope" in one_error(err)["detail"]


def test_catalog_commands(capsys, live):
    url, stack = live
    stack.submit()
    for agent in stack.agents:
        agent.cycle()
    code, out, _ = run(capsys, "catalog", "contents", "--request-id", "1", "--status", "staging",
                       "--url", url)
    assert code == 0
    assert [c["status"] for c in json.loads(out)["contents"]] == ["staging"] * 3
    code, out, _ = run(capsys, "catalog", "collections", "--request-id", "1", "--url", url)
    assert code == 0 and len(json.loads(out)["collections"]) == 2
    code, _, err = run(capsys, "catalog", "contents", "--url", url)
    assert code == 1
    one_error(err)


def test_unreachable_server_is_internal(capsys):
    code, _, err = run(capsys, "request", "status", "1", "--url", "http://127.0.0.1:9")
    assert code == 2 and one_error(err)["code"] == "internal"


# -- db audit -------------------------------------------------------------------

def test_db_audit(capsys, tmp_path):
    db = tmp_path / "cat.sqlite"
    code, _, err = run(capsys, "db", "audit", "--db", str(db))
    assert code == 1 and one_error(err)["code"] == "not_found"
    cat = Catalog(CatalogConfig(storage_path=str(db)))
    cat.close()
    code, out, _ = run(capsys, "db", "audit", "--db", str(db))
    body = json.loads(out)
    assert code == 0 and body["counter_mismatches"] == []
    assert len(body["fingerprint"]) == 64


# -- serve ----------------------------------------------------------------------

def _get(url):
    with urllib.request.urlopen(url, timeout=5) as resp:
        return json.loads(resp.read())


def test_serve_end_to_end(tmp_path):
    settings = tmp_path / "settings.json"
    settings.write_text(json.dumps({"agents": {k: {"poll_interval_seconds": 0.05}
                                               for k in ("transporter", "transformer",
                                                         "conductor")}}))
    sim = tmp_path / "sim.json"
    sim.write_text(json.dumps(SimTapeConfig(file_count=3, staging_seconds_base=0.1,
                                            clock="wall").to_dict()))
    db = tmp_path / "serve.sqlite"
    proc = subprocess.Popen(
        [sys.executable, "-m", "granule_dds", "serve", "--config", str(settings),
         "--bind", "127.0.0.1:0", "--db", str(db), "--sim-config", str(sim),
         "--consumer", "sim", "--duration", "20"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, cwd=tmp_path)
    try:
        url = json.loads(proc.stdout.readline())["listening"]
        req = urllib.request.Request(
            f"{url}/api/v1/requests", method="POST",
            data=json.dumps({"scope": "sim", "name": "carousel",
                             "request_type": "stage_in"}).encode())
        with urllib.request.urlopen(req, timeout=5) as resp:
            rid = json.loads(resp.read())["request_id"]
        deadline = time.monotonic() + 10
        while time.monotonic() < deadline:
            if _get(f"{url}/api/v1/requests/{rid}")["status"] == "finished":
                break
            time.sleep(0.05)
        body = _get(f"{url}/api/v1/requests/{rid}")
        assert body["status"] == "finished"
        assert [c["delivered"] for c in body["collections"]] == [3, 3]
        health = _get(f"{url}/api/v1/health")
        assert set(health["agents"]) == {"transporter", "transformer", "conductor"}
    finally:
        proc.send_signal(signal.SIGTERM)
        proc.wait(timeout=10)
    assert proc.returncode == 0
    assert os.path.exists(db)
