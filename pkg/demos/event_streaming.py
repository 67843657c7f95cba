"""Event-range streaming: one request, files split into event ranges.

Each staged file is cut into ranges of `chunk_size` events by the
event_splitter transform, and the consumer hears about every range as soon
as its file is on disk. Sizes are split in proportion to event counts.

Run: python3 demos/event_streaming.py
"""

import logging

from granule_dds.agents import AgentConfig, AgentKind, Conductor, Transformer, Transporter, drain
from granule_dds.api import ApiService
from granule_dds.catalog import Catalog, CatalogConfig
from granule_dds.clock import SimClock
from granule_dds.model import MessageStatus, MessageType, Relation
from granule_dds.plugins import CallbackNotifier, default_registry
from granule_dds.plugins.sim_tape import SimTape, SimTapeConfig

logging.basicConfig(level=logging.WARNING)

clock = SimClock(0.0)
catalog = Catalog(CatalogConfig(), clock)
sim = SimTape(SimTapeConfig(file_count=3, event_count_per_file=1000, staging_slots=1,
                            staging_seconds_base=5.0), clock)
registry = default_registry()
api = ApiService(catalog, registry)


def consumer(message, payload):
    if message.msg_type is MessageType.CONTENT_AVAILABLE:
        ranges = [(c["name"], c["min_id"], c["max_id"]) for c in payload["contents"]]
        print(f"t={clock.now():>4.0f} s  message {message.msg_id}: {ranges}")


notifier = CallbackNotifier(catalog, consumer)
agents = [Transporter(catalog, sim, AgentConfig(AgentKind.TRANSPORTER, "tp-demo")),
          Transformer(catalog, registry, AgentConfig(AgentKind.TRANSFORMER, "tf-demo")),
          Conductor(catalog, sim, notifier, AgentConfig(AgentKind.CONDUCTOR, "cd-demo"))]

resp = api.handle_submit({"scope": "sim", "name": "carousel", "request_type": "event_stream",
                          "transform_tag": "event_splitter", "chunk_size": 400})
rid = resp.body["request_id"]
print(f"submitted request {rid}: 3 files x 1000 events, ranges of 400")

# Drive the agents and the tape on the simulated clock; ack whatever the
# consumer received, as a real workload manager would over REST.
while not catalog.get_request(rid).status.terminal:
    drain(agents)
    for m in catalog.messages(rid, statuses=[MessageStatus.SENT]):
        api.handle_ack(m.msg_id)
    if (t := sim.next_event_time()) is not None:
        clock.advance_to(t)
        sim.advance_to(t)

outputs = catalog.contents_of(catalog.collection_of(rid, Relation.OUTPUT).collection_id)
print(f"\nrequest {catalog.get_request(rid).status.value} with {len(outputs)} ranges:")
for c in outputs[:4]:
    print(f"  {c.name} [{c.min_id}, {c.max_id}] {c.size_bytes / 1e6:.0f} MB {c.status.value}")
print(f"total output size {sum(c.size_bytes for c in outputs) / 1e9:.2f} GB from 3 GB of input")
