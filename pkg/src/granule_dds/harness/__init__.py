from granule_dds.harness.oracle import oracle_simulate
from granule_dds.harness.report import ComparisonSummary, Mode, SimReport, compare
from granule_dds.harness.scenario import (
    FineRun, ScenarioConfig, SimConsumer, run_fine, run_scenario,
)

__all__ = [
    "ComparisonSummary", "FineRun", "Mode", "ScenarioConfig", "SimConsumer", "SimReport",
    "compare", "oracle_simulate", "run_fine", "run_scenario",
]
