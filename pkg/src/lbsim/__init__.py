"""Discrete-time load-balancing simulator and dispatching-policy analysis."""

from .engine import SystemConfig, SystemState, SlotOutcome, run, run_reference, step
from .metrics import RunStatistics, batch_ci, heavy_traffic_point
from .policies import MemoryState, PolicySpec, parse_policy

__all__ = [
    "SystemConfig", "SystemState", "SlotOutcome", "run", "run_reference", "step",
    "RunStatistics", "batch_ci", "heavy_traffic_point",
    "MemoryState", "PolicySpec", "parse_policy",
]
