"""Hierarchical GPU/CPU KV-cache placement model.

GPU memory acts as a cache over a larger CPU pool.  A per-request residency
record tracks how many KV tokens live on the GPU, how long a prefix has been
mirrored to CPU memory (the write-through pointer), and what is in flight.
The operations here are pure planning functions: the simulation engine owns
the actual transfer channels and calls these to decide what to move.

Key behaviors modeled:

* write-through: newly generated KV tokens are mirrored to host memory in
  chunks sized to fit inside the next compute interval, ordered by client
  buffer occupancy (fat buffers first, since those requests are the likely
  preemption victims);
* preemption: the already-synced prefix is released instantly, only the
  unsynced residual needs a device-to-host transfer;
* resumption: missing tokens stream back host-to-device in fixed-size chunks;
* load-evict overlap: the two PCIe directions progress concurrently, with
  loads admitted chunk-by-chunk as freed memory becomes available.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .costs import CostModel

DEFAULT_CHUNK_TOKENS = 512


class ResidencyError(RuntimeError):
    """Operation applied to a request in the wrong placement state."""


@dataclass
class KvResidency:
    """Placement of one request's KV tokens across the memory hierarchy."""

    request_id: int
    total_kv: int = 0  # prompt + generated so far
    gpu_resident: int = 0
    cpu_synced: int = 0  # write-through pointer: longest prefix on CPU
    inflight_d2h: int = 0
    inflight_h2d: int = 0

    def check(self) -> None:
        assert 0 <= self.gpu_resident <= self.total_kv, self
        assert 0 <= self.cpu_synced <= self.total_kv, self
        assert self.inflight_d2h >= 0 and self.inflight_h2d >= 0, self

    @property
    def resumable(self) -> bool:
        """Every token recoverable without recompute."""
        return self.cpu_synced + self.gpu_resident >= self.total_kv

    @property
    def unsynced(self) -> int:
        """Tokens not yet mirrored to CPU and not already being written."""
        return max(0, self.total_kv - self.cpu_synced - self.inflight_d2h)


@dataclass(frozen=True)
class Chunk:
    """One transfer unit on a PCIe channel."""

    owner: int
    tokens: int
    direction: str  # h2d | d2h
    kind: str  # writethrough | evict | load
    queued_at: float = 0.0


@dataclass(frozen=True)
class EvictionPlan:
    request_id: int
    instant_release: int
    residual_d2h: int


@dataclass(frozen=True)
class LoadPlan:
    request_id: int
    h2d_tokens: int
    chunks: tuple[int, ...]


@dataclass
class TransferQueueState:
    """Snapshot of the two PCIe channels for overhead estimation."""

    d2h_queue: list[Chunk] = field(default_factory=list)
    h2d_queue: list[Chunk] = field(default_factory=list)
    measured_d2h_rate: float = 0.0  # tokens/second, EMA of completed chunks
    measured_h2d_rate: float = 0.0

    def queued_tokens(self, direction: str) -> int:
        queue = self.d2h_queue if direction == "d2h" else self.h2d_queue
        return sum(c.tokens for c in queue)


def split_chunks(tokens: int, chunk_tokens: int = DEFAULT_CHUNK_TOKENS) -> tuple[int, ...]:
    """Break a token count into fixed-size chunks plus a remainder."""
    if tokens <= 0:
        return ()
    full, rest = divmod(tokens, chunk_tokens)
    sizes = [chunk_tokens] * full
    if rest:
        sizes.append(rest)
    return tuple(sizes)


def plan_write_chunk(
    pending: dict[int, int],
    est_compute_interval: float,
    cm: CostModel,
    buffers: dict[int, int],
) -> list[tuple[int, int]]:
    """Plan the write-through transfers for the next compute interval.

    ``pending`` maps request id to unsynced token count, ``buffers`` to the
    current client-buffer occupancy.  The plan's total token count fits in
    ``est_compute_interval`` at the device-to-host bandwidth so the writes
    finish before the next scheduling decision.  Requests with larger buffers
    are written first (they are the likelier preemption victims); ties break
    toward the lower id.  Returns an ordered list of (request_id, tokens).
    """
    if est_compute_interval <= 0:
        raise ValueError("est_compute_interval must be > 0")
    capacity = int(est_compute_interval * cm.d2h_bandwidth)
    order = sorted(
        (rid for rid, n in pending.items() if n > 0),
        key=lambda rid: (-buffers.get(rid, 0), rid),
    )
    plan: list[tuple[int, int]] = []
    for rid in order:
        if capacity <= 0:
            break
        take = min(pending[rid], capacity)
        plan.append((rid, take))
        capacity -= take
    return plan


def preempt(residency: KvResidency) -> EvictionPlan:
    """Plan the eviction of a GPU-resident request.

    The synced prefix is released with zero transfer; only tokens never
    mirrored to the CPU occupy the device-to-host channel.
    """
    if residency.gpu_resident <= 0:
        raise ResidencyError(f"request {residency.request_id} has no GPU-resident tokens")
    instant = min(residency.gpu_resident, residency.cpu_synced)
    residual = residency.total_kv - residency.cpu_synced
    return EvictionPlan(residency.request_id, instant_release=instant, residual_d2h=residual)


def resume(
    residency: KvResidency, chunk_tokens: int = DEFAULT_CHUNK_TOKENS
) -> LoadPlan:
    """Plan the host-to-device load that makes an evicted request runnable."""
    if not residency.resumable:
        raise ResidencyError(
            f"request {residency.request_id} is not resumable; recompute instead"
        )
    missing = residency.total_kv - residency.gpu_resident
    return LoadPlan(
        residency.request_id,
        h2d_tokens=missing,
        chunks=split_chunks(missing, chunk_tokens),
    )


def io_overhead_estimate(residency: KvResidency, tq: TransferQueueState, cm: CostModel) -> float:
    """Four-term context-switch I/O estimate for one request.

    Sums eviction queueing, eviction transfer of the unsynced residual,
    load queueing, and the load of every token missing from the GPU, using
    measured channel rates when available and configured bandwidths before
    any transfer has completed.
    """
    d2h_rate = tq.measured_d2h_rate or cm.d2h_bandwidth
    h2d_rate = tq.measured_h2d_rate or cm.h2d_bandwidth
    residual = max(0, residency.total_kv - residency.cpu_synced)
    load = max(0, residency.total_kv - residency.gpu_resident)
    if residency.gpu_resident >= residency.total_kv:
        # Fully resident: no eviction pending for this decision, no load.
        residual = 0
        load = 0
    t_evict_queueing = tq.queued_tokens("d2h") / d2h_rate
    t_evict = residual / d2h_rate
    t_load_queueing = tq.queued_tokens("h2d") / h2d_rate
    t_load = load / h2d_rate
    return t_evict_queueing + t_evict + t_load_queueing + t_load


def overlap_timeline(
    evictions: list[EvictionPlan],
    loads: list[LoadPlan],
    tq: TransferQueueState,
    cm: CostModel,
    free_gpu_tokens: int = 0,
    overlap: bool = True,
) -> dict[int, float]:
    """Simulate the two channels analytically and return per-plan finish times.

    Eviction residuals stream on the d2h channel while load chunks stream on
    h2d.  A load chunk is admitted once freed GPU tokens (instant releases
    plus completed residual evictions plus ``free_gpu_tokens``) cover it, so
    memory is repartitioned chunk-by-chunk.  With ``overlap=False`` every
    eviction completes before the first load starts (the serialized
    baseline).  Plans must reference distinct requests.
    """
    ids = [e.request_id for e in evictions] + [l.request_id for l in loads]
    if len(set(ids)) != len(ids):
        raise ValueError("plans must reference distinct requests")

    done: dict[int, float] = {}
    freed = free_gpu_tokens + sum(e.instant_release for e in evictions)

    # d2h channel: residual evictions, FIFO in plan order.
    t_d2h = tq.queued_tokens("d2h") / cm.d2h_bandwidth
    evict_events: list[tuple[float, int]] = []  # (finish time, tokens freed)
    for ev in evictions:
        if ev.residual_d2h <= 0:
            done[ev.request_id] = t_d2h
            continue
        t_d2h += ev.residual_d2h / cm.d2h_bandwidth
        evict_events.append((t_d2h, ev.residual_d2h))
        done[ev.request_id] = t_d2h

    # h2d channel: load chunks, admitted under the freed-memory constraint.
    t_h2d = tq.queued_tokens("h2d") / cm.h2d_bandwidth
    if not overlap:
        t_h2d = max(t_h2d, t_d2h)
    pending_evicts = list(evict_events)
    for plan in loads:
        if plan.h2d_tokens <= 0:
            done[plan.request_id] = t_h2d
            continue
        for chunk in plan.chunks:
            while freed < chunk:
                if not pending_evicts:
                    raise MemoryError(
                        f"load for request {plan.request_id} exceeds freed GPU capacity"
                    )
                finish, tokens = pending_evicts.pop(0)
                freed += tokens
                t_h2d = max(t_h2d, finish)
            freed -= chunk
            t_h2d += chunk / cm.h2d_bandwidth
        done[plan.request_id] = t_h2d
    return done


def update_rate_ema(previous: float, sample: float, factor: float = 0.3) -> float:
    """Exponential moving average of observed transfer throughput."""
    if previous <= 0:
        return sample
    return previous + factor * (sample - previous)


def advance_write_through(residency: KvResidency, tokens: int) -> KvResidency:
    """Land a completed write-through chunk: move the synced pointer forward."""
    updated = replace(
        residency,
        cpu_synced=min(residency.total_kv, residency.cpu_synced + tokens),
        inflight_d2h=max(0, residency.inflight_d2h - tokens),
    )
    updated.check()
    return updated
