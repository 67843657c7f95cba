from __future__ import annotations

from dataclasses import replace

from granule_dds.errors import MissingEventCount
from granule_dds.model import Content, ContentStatus, split_event_ranges
from granule_dds.plugins.base import TransformPlugin


def _output_of(content: Content, **changes) -> Content:
    return replace(content, status=ContentStatus.AVAILABLE, parent_content_id=content.content_id,
                   content_id=None, collection_id=None, version=0, **changes)


class Passthrough(TransformPlugin):
    """Identity transform: the staged file itself is the deliverable."""

    def transform(self, content, params):
        return [_output_of(content)]


def proportional_size(size_bytes: int, n_events: int, event_count: int) -> int:
    """``round(size_bytes * n_events / event_count)`` with halves rounded up."""
    return (2 * size_bytes * n_events + event_count) // (2 * event_count)


class EventRangeSplitter(TransformPlugin):
    """Cut a file into event ranges of ``params['chunk_size']`` events.

    A whole-file input whose range is (0, 0) carries no event count; pass
    ``params['event_count']`` explicitly in that case.
    """

    def transform(self, content, params):
        event_count = params.get("event_count")
        if event_count is None:
            if content.min_id == 0 and content.max_id == 0:
                raise MissingEventCount(f"{content.name}: event count unknown")
            event_count = content.max_id - content.min_id + 1
        chunk_size = int(params["chunk_size"])
        outputs = []
        for lo, hi in split_event_ranges(int(event_count), chunk_size):
            n = hi - lo + 1
            outputs.append(_output_of(
                content,
                name=f"{content.name}#{lo}-{hi}",
                min_id=lo, max_id=hi,
                size_bytes=proportional_size(content.size_bytes, n, event_count),
                checksum="",
                locator=f"{content.locator}#{lo}-{hi}",
            ))
        return outputs
