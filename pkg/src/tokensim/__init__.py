"""Discrete-event simulator for buffer-aware LLM text-streaming serving."""

from .costs import CostModel, decode_iteration_time, prefill_time, transfer_time
from .engine import Engine, SimConfig, SimResult, run
from .metrics import (
    EffectiveThroughputConfig,
    QosConfig,
    effective_throughput,
    qos,
    raw_throughput,
    token_weight,
    ttft_stats,
)
from .scheduler import SchedulerConfig, make_policy
from .workload import (
    RequestSpec,
    Trace,
    WorkloadConfig,
    generate_burst,
    generate_poisson,
    load_trace,
)

__version__ = "0.1.0"

__all__ = [
    "CostModel",
    "EffectiveThroughputConfig",
    "Engine",
    "QosConfig",
    "RequestSpec",
    "SchedulerConfig",
    "SimConfig",
    "SimResult",
    "Trace",
    "WorkloadConfig",
    "decode_iteration_time",
    "effective_throughput",
    "generate_burst",
    "generate_poisson",
    "load_trace",
    "make_policy",
    "prefill_time",
    "qos",
    "raw_throughput",
    "run",
    "token_weight",
    "transfer_time",
    "ttft_stats",
]
