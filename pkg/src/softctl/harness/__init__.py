"""Scenarios, baselines, metrics and the closed-loop runner."""

from softctl.harness.baselines import PidGains, PidState, continuous_stimulation_step, pid_step
from softctl.harness.metrics import asf, safety_ratio, summarize, tsf
from softctl.harness.runner import RunLog, TrialResult, run_scenario, write_outputs
from softctl.harness.scenario import Scenario, load_scenario, parse_scenario

__all__ = [
    "PidGains",
    "PidState",
    "RunLog",
    "Scenario",
    "TrialResult",
    "asf",
    "continuous_stimulation_step",
    "load_scenario",
    "parse_scenario",
    "pid_step",
    "run_scenario",
    "safety_ratio",
    "summarize",
    "tsf",
    "write_outputs",
]
