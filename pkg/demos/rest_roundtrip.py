"""The REST service end to end on a local port.

Starts the HTTP server and the three agents in this process, submits a
request over HTTP, polls it to completion while a small consumer acks each
notification over HTTP, then pages through the finished contents.

Run: python3 demos/rest_roundtrip.py
"""

import json
import threading
import urllib.error
import urllib.request

from granule_dds.agents import (
    AgentConfig, AgentKind, Conductor, Transformer, Transporter, run_daemon,
)
from granule_dds.api import ApiService, make_server
from granule_dds.catalog import Catalog, CatalogConfig
from granule_dds.clock import WallClock
from granule_dds.plugins import CallbackNotifier, default_registry
from granule_dds.plugins.sim_tape import SimTape, SimTapeConfig

clock = WallClock()
catalog = Catalog(CatalogConfig(), clock)
sim = SimTape(SimTapeConfig(file_count=4, staging_slots=2, staging_seconds_base=0.2,
                            clock="wall"), clock)
registry = default_registry()
api = ApiService(catalog, registry)
server = make_server(api, "127.0.0.1", 0)
base = f"http://127.0.0.1:{server.server_address[1]}/api/v1"


def call(path, body=None):
    data = None if body is None else json.dumps(body).encode()
    req = urllib.request.Request(base + path, data=data, method="POST" if data else "GET")
    with urllib.request.urlopen(req, timeout=5) as resp:
        return json.loads(resp.read())


acks = []
notifier = CallbackNotifier(catalog, lambda m, p: acks.append(m.msg_id))
stop = threading.Event()
agents = [Transporter(catalog, sim, AgentConfig(AgentKind.TRANSPORTER, "tp", 0.05)),
          Transformer(catalog, registry, AgentConfig(AgentKind.TRANSFORMER, "tf", 0.05)),
          Conductor(catalog, sim, notifier, AgentConfig(AgentKind.CONDUCTOR, "cd", 0.05))]
threads = [threading.Thread(target=run_daemon, args=(a, stop), daemon=True) for a in agents]
threads.append(threading.Thread(target=server.serve_forever, args=(0.05,), daemon=True))
for t in threads:
    t.start()

doc = {"scope": "sim", "name": "carousel", "request_type": "stage_in"}
rid = call("/requests", doc)["request_id"]
print(f"POST /requests -> {rid}")
print(f"POST the same document again -> {call('/requests', doc)['request_id']}")

terminal = ("finished", "sub_finished", "failed", "cancelled")
while (body := call(f"/requests/{rid}"))["status"] not in terminal:
    for msg_id in list(acks):
        try:
            status = call(f"/messages/{msg_id}/ack", {})["status"]
        except urllib.error.HTTPError as exc:
            if exc.code != 409:  # 409: the conductor has not recorded it Sent yet
                raise
            continue
        acks.remove(msg_id)
        print(f"POST /messages/{msg_id}/ack -> {status}")
    stop.wait(0.05)

print(f"request {rid}: {body['status']}, collections "
      f"{[(c['relation'], c['delivered'], c['total']) for c in body['collections']]}")
page = call(f"/catalog/contents?request_id={rid}&page_size=2")
print(f"first page of contents: {[(c['name'], c['status']) for c in page['contents']]}, "
      f"next_page_token={page.get('next_page_token')}")

stop.set()
server.shutdown()
server.server_close()
catalog.close()
