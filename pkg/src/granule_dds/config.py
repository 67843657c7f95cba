"""Service settings read from a JSON file.

Keys may be written flat (``{"http.bind_addr": "0.0.0.0:8080"}``) or nested
(``{"http": {"bind_addr": "0.0.0.0:8080"}}``); both spellings end up in the
same dotted namespace.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from granule_dds.agents import AgentConfig, AgentKind
from granule_dds.cache_policy import CachePolicy
from granule_dds.errors import InvalidArgument

DEFAULTS = {
    "http.bind_addr": "127.0.0.1:8443",
    "http.page_size_max": 1000,
    "catalog.storage_path": "granule_dds.sqlite",
    "catalog.lease_seconds_default": 60,
    "cache.alpha": 1.0,
    "cache.lambda_decay": 1.0 / 86400,
    "cache.base_lifetime_seconds": 86400.0,
    "cache.min_lifetime_seconds": 3600.0,
    "cache.max_lifetime_seconds": 2592000.0,
}
for _kind in AgentKind:
    DEFAULTS[f"agents.{_kind.value}.poll_interval_seconds"] = 1.0
    DEFAULTS[f"agents.{_kind.value}.batch_limit"] = 50


def flatten(data: dict, prefix: str = "") -> dict:
    flat = {}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


@dataclass
class Settings:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    @classmethod
    def from_dict(cls, data: dict) -> "Settings":
        flat = flatten(data)
        unknown = sorted(set(flat) - set(DEFAULTS))
        if unknown:
            raise InvalidArgument(f"unknown config keys: {', '.join(unknown)}")
        return cls({**DEFAULTS, **flat})

    @classmethod
    def load(cls, path=None) -> "Settings":
        if path is None:
            return cls()
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except (OSError, ValueError) as exc:
            raise InvalidArgument(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def __getitem__(self, key):
        return self.values[key]

    def agent_config(self, kind: AgentKind, agent_id: str = "") -> AgentConfig:
        kind = AgentKind(kind)
        return AgentConfig(
            kind, agent_id,
            poll_interval_seconds=float(self[f"agents.{kind.value}.poll_interval_seconds"]),
            batch_limit=int(self[f"agents.{kind.value}.batch_limit"]))

    def cache_policy(self) -> CachePolicy:
        return CachePolicy(
            alpha=float(self["cache.alpha"]),
            lambda_decay=float(self["cache.lambda_decay"]),
            base_lifetime_seconds=float(self["cache.base_lifetime_seconds"]),
            min_lifetime_seconds=float(self["cache.min_lifetime_seconds"]),
            max_lifetime_seconds=float(self["cache.max_lifetime_seconds"]))
