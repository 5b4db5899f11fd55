"""Parametric latency model for compute and PCIe transfers.

Decode cost is affine in batch size and total context so that larger batches
slow per-request token generation, which is the trade-off the scheduler has
to navigate.  Coefficients are config inputs; the shipped defaults realize a
40 tokens/second single-request toy system.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class CostModel:
    prefill_per_token: float = 5e-4  # seconds/token
    decode_base: float = 0.0225  # seconds/iteration
    decode_per_request: float = 0.0025  # seconds/(iteration*request)
    decode_per_ctx_token: float = 0.0  # seconds/(iteration*token)
    h2d_bandwidth: float = 20000.0  # tokens/second, CPU -> GPU
    d2h_bandwidth: float = 20000.0  # tokens/second, GPU -> CPU
    schedule_tick_cost: float = 4e-4  # seconds per reschedule

    def __post_init__(self):
        for name in (
            "prefill_per_token",
            "decode_base",
            "decode_per_request",
            "decode_per_ctx_token",
            "schedule_tick_cost",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.h2d_bandwidth <= 0 or self.d2h_bandwidth <= 0:
            raise ValueError("transfer bandwidths must be > 0")

    def bandwidth(self, direction: str) -> float:
        if direction == "h2d":
            return self.h2d_bandwidth
        if direction == "d2h":
            return self.d2h_bandwidth
        raise ValueError(f"unknown transfer direction {direction!r}")


def decode_iteration_time(batch_size: int, total_ctx: int, cm: CostModel) -> float:
    """Seconds for one decode iteration of ``batch_size`` requests.

    ``total_ctx`` is the summed context (KV tokens) across the batch.
    Strictly increasing in both arguments when the coefficients are positive.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if total_ctx < 0:
        raise ValueError("total_ctx must be >= 0")
    return (
        cm.decode_base
        + cm.decode_per_request * batch_size
        + cm.decode_per_ctx_token * total_ctx
    )


def prefill_time(prompt_len: int, cm: CostModel) -> float:
    """Seconds to prefill ``prompt_len`` prompt tokens."""
    if prompt_len < 1:
        raise ValueError("prompt_len must be >= 1")
    return cm.prefill_per_token * prompt_len


def transfer_time(n_tokens: int, direction: str, cm: CostModel) -> float:
    """Seconds to move ``n_tokens`` across PCIe in the given direction."""
    if n_tokens < 0:
        raise ValueError("n_tokens must be >= 0")
    if n_tokens == 0:
        return 0.0
    return n_tokens / cm.bandwidth(direction)
