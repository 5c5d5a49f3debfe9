"""Token-level KV cache inference simulator with sparse window attention."""

from swakv.attention import SparsityConfig, swa_select
from swakv.config import ConfigError, RunConfig
from swakv.engine import Engine, ModelShape, ToyModel, run_inference
from swakv.memsim import CostParams, OutOfDeviceMemory
from swakv.scheduler import InfeasiblePlan, SchedulePlan, make_plan, solve_plan

__all__ = [
    "ConfigError",
    "CostParams",
    "Engine",
    "InfeasiblePlan",
    "ModelShape",
    "OutOfDeviceMemory",
    "RunConfig",
    "SchedulePlan",
    "SparsityConfig",
    "ToyModel",
    "make_plan",
    "run_inference",
    "solve_plan",
    "swa_select",
]
