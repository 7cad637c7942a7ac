"""Scenario configuration, simulation loop, replay, and CLI."""

from .scenario import ScenarioConfig, load_scenario, build_scenario, bundled_scenario_path
from .simulate import RunAborted, SimulationRun, run
from .replay import IntegrityError, ReplayData, replay

__all__ = [
    "IntegrityError",
    "ReplayData",
    "RunAborted",
    "ScenarioConfig",
    "SimulationRun",
    "build_scenario",
    "bundled_scenario_path",
    "load_scenario",
    "replay",
    "run",
]
