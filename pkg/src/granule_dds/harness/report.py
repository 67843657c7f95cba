from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field

from granule_dds.errors import MismatchedScenarios


class Mode(str, enum.Enum):
    FINE = "fine"
    COARSE = "coarse"


@dataclass
class SimReport:
    peak_pool_bytes: int
    makespan_seconds: float
    time_to_first_delivery_seconds: float
    per_content_latency: list = field(default_factory=list)
    total_released_bytes: int = 0
    mode: Mode = Mode.FINE
    seed: int = 0

    def __post_init__(self):
        self.mode = Mode(self.mode)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "SimReport":
        return cls(**data)

    @classmethod
    def load(cls, path) -> "SimReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class ComparisonSummary:
    pool_reduction_fraction: float
    makespan_ratio: float
    ttfd_ratio: float

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(a: float, b: float) -> float:
    if b == 0:
        return 1.0 if a == 0 else float("inf")
    return a / b


def compare(fine: SimReport, coarse: SimReport) -> ComparisonSummary:
    """Fine-vs-coarse summary; ratios are fine over coarse."""
    if fine.seed != coarse.seed:
        raise MismatchedScenarios(f"seeds differ: {fine.seed} vs {coarse.seed}")
    if coarse.peak_pool_bytes == 0:
        reduction = 0.0
    else:
        reduction = 1.0 - fine.peak_pool_bytes / coarse.peak_pool_bytes
    return ComparisonSummary(
        pool_reduction_fraction=reduction,
        makespan_ratio=_ratio(fine.makespan_seconds, coarse.makespan_seconds),
        ttfd_ratio=_ratio(fine.time_to_first_delivery_seconds,
                          coarse.time_to_first_delivery_seconds),
    )
