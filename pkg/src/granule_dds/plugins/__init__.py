"""Plugin framework: base classes, built-ins and a static registry.

Plugins are looked up by ``"<kind>.<key>"`` strings. A request's
``transform_tag`` names a transform key, so ``"event_splitter"`` resolves
to ``"transform.event_splitter"``.
"""

from __future__ import annotations

from typing import Callable

from granule_dds.errors import UnknownPlugin
from granule_dds.plugins.base import (
    DDMPlugin, NotifierPlugin, Replica, ReplicaState, TransformPlugin,
)
from granule_dds.plugins.notifiers import CallbackNotifier, FileQueueNotifier
from granule_dds.plugins.sim_tape import SimTape, SimTapeConfig
from granule_dds.plugins.transforms import EventRangeSplitter, Passthrough

__all__ = [
    "DDMPlugin", "NotifierPlugin", "TransformPlugin", "Replica", "ReplicaState",
    "PluginRegistry", "default_registry", "SimTape", "SimTapeConfig",
    "Passthrough", "EventRangeSplitter", "FileQueueNotifier", "CallbackNotifier",
]

KINDS = ("ddm", "transform", "notify")


class PluginRegistry:
    def __init__(self):
        self._factories: dict[str, Callable] = {}

    def register(self, key: str, factory: Callable) -> None:
        kind, _, name = key.partition(".")
        if kind not in KINDS or not name:
            raise ValueError(f"plugin keys look like '<kind>.<name>', kind in {KINDS}: {key!r}")
        if key in self._factories:
            raise ValueError(f"plugin {key!r} already registered")
        self._factories[key] = factory

    def __contains__(self, key: str) -> bool:
        return key in self._factories

    def keys(self, kind=None) -> list[str]:
        return sorted(k for k in self._factories if kind is None or k.startswith(kind + "."))

    def create(self, key: str, **kwargs):
        try:
            factory = self._factories[key]
        except KeyError:
            raise UnknownPlugin(key) from None
        return factory(**kwargs)

    def transform(self, tag: str) -> TransformPlugin:
        return self.create(transform_key(tag))

    def has_transform(self, tag: str) -> bool:
        return transform_key(tag) in self._factories


def transform_key(tag: str) -> str:
    return tag if tag.startswith("transform.") else f"transform.{tag}"


def default_registry() -> PluginRegistry:
    reg = PluginRegistry()
    reg.register("ddm.sim_tape", SimTape)
    reg.register("transform.passthrough", Passthrough)
    reg.register("transform.event_splitter", EventRangeSplitter)
    reg.register("notify.file_queue", FileQueueNotifier)
    reg.register("notify.callback", CallbackNotifier)
    return reg
