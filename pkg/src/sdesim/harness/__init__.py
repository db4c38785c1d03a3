"""Scenarios, experiment runner and metrics."""

from .experiment import RunResult, World, build_world, effective_scenario, run_experiment
from .metrics import Metrics, MetricsError, compute_metrics, measure_rpo, measure_rto
from .scenario import Scenario, ScenarioError, bundled_scenario, load_scenario, parse_scenario

__all__ = [
    "Metrics", "MetricsError", "RunResult", "Scenario", "ScenarioError", "World",
    "build_world", "bundled_scenario", "compute_metrics", "effective_scenario",
    "load_scenario", "measure_rpo", "measure_rto", "parse_scenario", "run_experiment",
]
