"""Published JSON schemas for the REST API and report files."""

import json
from functools import lru_cache
from importlib import resources

from jsonschema import Draft202012Validator
from referencing import Registry, Resource

NAMES = (
    "request_document", "submit_response", "collection", "request", "content",
    "contents_page", "collections_page", "ack_response", "health", "error", "sim_report",
)


@lru_cache(maxsize=None)
def load(name: str) -> dict:
    text = resources.files(__package__).joinpath(f"{name}.json").read_text(encoding="utf-8")
    return json.loads(text)


@lru_cache(maxsize=None)
def _registry() -> Registry:
    return Registry().with_resources(
        (load(n)["$id"], Resource.from_contents(load(n))) for n in NAMES)


@lru_cache(maxsize=None)
def validator(name: str) -> Draft202012Validator:
    return Draft202012Validator(load(name), registry=_registry())


def validate(name: str, instance) -> None:
    """Raise ``jsonschema.ValidationError`` if ``instance`` breaks schema ``name``."""
    validator(name).validate(instance)
