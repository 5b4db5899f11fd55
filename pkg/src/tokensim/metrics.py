"""Evaluation metrics for streamed token delivery.

Two families live here.  The QoS score combines per-token usefulness weights
with penalties for startup delay and reader stalls; effective throughput
counts only tokens generated while the client buffer is low enough for them
to matter to a live reader.  Both consume the per-request records produced by
a simulation run and are pure functions of their inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class QosConfig:
    buffer_threshold_frac: float = 0.10  # fraction of output length
    decay_alpha: float = 0.01  # 1/token
    ttft_penalty_weight: float = 0.5  # 1/second
    rebuffer_penalty_weight: float = 1.0  # 1/second

    def __post_init__(self):
        if not 0 < self.buffer_threshold_frac < 1:
            raise MetricError("buffer_threshold_frac must be in (0, 1)")
        if self.decay_alpha <= 0:
            raise MetricError("decay_alpha must be > 0")
        if self.ttft_penalty_weight < 0 or self.rebuffer_penalty_weight < 0:
            raise MetricError("penalty weights must be >= 0")


@dataclass(frozen=True)
class EffectiveThroughputConfig:
    tau1_frac: float = 0.10
    tau2_frac: float = 0.20

    def __post_init__(self):
        if not 0 < self.tau1_frac < self.tau2_frac < 1:
            raise MetricError("need 0 < tau1_frac < tau2_frac < 1")


def token_weight(buffer_at_gen: int, output_len: int, cfg: QosConfig) -> float:
    """Usefulness of a token given the buffer occupancy when it appeared.

    Full weight while the buffer is at or below the per-request threshold,
    then linear decay at ``decay_alpha`` per token, clamped at zero.
    """
    if buffer_at_gen < 0:
        raise MetricError("buffer_at_gen must be >= 0")
    if output_len < 1:
        raise MetricError("output_len must be >= 1")
    threshold = cfg.buffer_threshold_frac * output_len
    if buffer_at_gen <= threshold:
        return 1.0
    return max(1.0 - cfg.decay_alpha * (buffer_at_gen - threshold), 0.0)


def _require_complete(records: Iterable) -> None:
    for rec in records:
        if rec.ttft is None or len(rec.gen_times) != rec.output_len:
            raise MetricError(f"record {rec.request_id} is incomplete")


def qos(records: Sequence, total_time: float, cfg: QosConfig) -> float:
    """Aggregate quality-of-service score, normalized by total process time.

    Per request: the sum of its token weights minus weighted penalties for
    time-to-first-token and accumulated rebuffering.
    """
    if total_time <= 0:
        raise MetricError("total_time must be > 0")
    if not records:
        return 0.0
    _require_complete(records)
    total = 0.0
    for rec in records:
        weights = sum(
            token_weight(b, rec.output_len, cfg) for b in rec.buffer_at_gen
        )
        total += (
            weights
            - cfg.ttft_penalty_weight * rec.ttft
            - cfg.rebuffer_penalty_weight * rec.rebuffer_s
        )
    return total / total_time


def effective_token_weight(
    buffer_at_gen: int, output_len: int, cfg: EffectiveThroughputConfig
) -> float:
    """Timeliness weight for throughput accounting.

    Tokens generated into a buffer below tau1 of the output length count in
    full; contribution decays linearly to zero between tau1 and tau2; tokens
    beyond tau2 are run-ahead and excluded.
    """
    tau1 = cfg.tau1_frac * output_len
    tau2 = cfg.tau2_frac * output_len
    if buffer_at_gen < tau1:
        return 1.0
    if buffer_at_gen >= tau2:
        return 0.0
    return (tau2 - buffer_at_gen) / (tau2 - tau1)


def effective_throughput(
    records: Sequence, total_time: float, cfg: EffectiveThroughputConfig
) -> float:
    """Timeliness-weighted tokens per second over the whole run."""
    if total_time <= 0:
        raise MetricError("total_time must be > 0")
    if not records:
        return 0.0
    _require_complete(records)
    total = 0.0
    for rec in records:
        total += sum(
            effective_token_weight(b, rec.output_len, cfg) for b in rec.buffer_at_gen
        )
    return total / total_time


def raw_throughput(records: Sequence, total_time: float) -> float:
    """Generated tokens per second, ignoring timeliness."""
    if total_time <= 0:
        raise MetricError("total_time must be > 0")
    return sum(len(rec.gen_times) for rec in records) / total_time


def nearest_rank(sorted_values: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile: rank = floor(p*n/100) + 1, capped at n."""
    n = len(sorted_values)
    if n == 0:
        raise MetricError("empty input")
    rank = min(n, math.floor(pct * n / 100.0) + 1)
    return sorted_values[rank - 1]


def ttft_stats(records: Sequence) -> dict[str, float]:
    """Mean/p50/p99 of time-to-first-token across records."""
    if not records:
        raise MetricError("empty input")
    ttfts = sorted(rec.ttft for rec in records)
    if any(t is None for t in ttfts):
        raise MetricError("record missing ttft")
    return {
        "mean": sum(ttfts) / len(ttfts),
        "p50": nearest_rank(ttfts, 50.0),
        "p99": nearest_rank(ttfts, 99.0),
    }


def replay_rebuffer(
    ttft: float, gen_times: Sequence[float], consume_rate: float
) -> float:
    """Recompute total stall time from the token timeline alone.

    Independent of the engine's accounting: walks the reader's consume
    schedule (one token every 1/rate from the first token, re-anchored after
    each stall) against generation timestamps.
    """
    if not gen_times:
        return 0.0
    period = 1.0 / consume_rate
    rebuffer = 0.0
    next_read = ttft
    for avail in gen_times:
        if avail <= next_read:
            pickup = next_read
        else:
            rebuffer += avail - next_read
            pickup = avail
        next_read = pickup + period
    return rebuffer
