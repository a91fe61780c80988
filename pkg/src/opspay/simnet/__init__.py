"""Deterministic single-process network simulation and attack harness."""

from .engine import Auditor, Engine, SimActor, SimCrash
from .scenario import DEMO_SCRIPT, Scenario, ScenarioError, Step, parse_scenario, random_scenario
from .trace import TraceEvent, decode_event, dump_trace, encode_event, load_trace

__all__ = [
    "Auditor",
    "DEMO_SCRIPT",
    "Engine",
    "Scenario",
    "ScenarioError",
    "SimActor",
    "SimCrash",
    "Step",
    "TraceEvent",
    "decode_event",
    "dump_trace",
    "encode_event",
    "load_trace",
    "parse_scenario",
    "random_scenario",
]
