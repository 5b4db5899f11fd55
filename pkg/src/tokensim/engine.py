"""Deterministic discrete-event simulation core.

Virtual time advances over seven event kinds: arrivals, prefill completions,
decode iterations, chunked PCIe transfers, reader consumption, scheduler
ticks, and request completion.  Ties are broken by a fixed kind order and
then by subject id, so the event log is a pure function of the inputs.

The GPU runs one compute activity at a time (a prefill job or one decode
iteration over the current batch) with prefill given priority.  The two PCIe
directions are independent FIFO channels, which is what lets resume loads
overlap with residual evictions.  Readers consume one token every 1/rate
seconds starting at the first generated token; a consume that finds an empty
buffer stalls and accrues rebuffer time until the next token lands.
"""

from __future__ import annotations

import hashlib
import heapq
import json
from collections import deque
from dataclasses import dataclass, field

from .costs import CostModel, decode_iteration_time, transfer_time
from .kvstore import (
    Chunk,
    KvResidency,
    TransferQueueState,
    io_overhead_estimate,
    preempt as plan_preempt,
    plan_write_chunk,
    split_chunks,
    update_rate_ema,
)
from .scheduler import (
    MemberView,
    Policy,
    SystemSnapshot,
    WaitingView,
    make_policy,
    should_tick,
)
from .workload import Trace

# Event kinds in tie-break order: completed work becomes visible before the
# scheduler tick at the same timestamp, and arrivals come last.
REQUEST_DONE = "request_done"
CHUNK_TRANSFER_DONE = "chunk_transfer_done"
DECODE_ITER_DONE = "decode_iter_done"
PREFILL_DONE = "prefill_done"
CONSUME = "consume"
SCHEDULE_TICK = "schedule_tick"
ARRIVAL = "arrival"

_KIND_RANK = {
    REQUEST_DONE: 0,
    CHUNK_TRANSFER_DONE: 1,
    DECODE_ITER_DONE: 2,
    PREFILL_DONE: 3,
    CONSUME: 4,
    SCHEDULE_TICK: 5,
    ARRIVAL: 6,
}

# Request lifecycle states.
WAITING = "waiting"
PREFILL_WAIT = "prefill_wait"
PREFILLING = "prefilling"
RUNNING = "running"
PREEMPTED = "preempted"
LOADING = "loading"
RECOMPUTING = "recomputing"
GEN_DONE = "gen_done"
DONE = "done"

_SLOT_HOLDERS = {PREFILL_WAIT, PREFILLING, RUNNING, LOADING, RECOMPUTING}
_PINNED = {PREFILL_WAIT, PREFILLING, LOADING, RECOMPUTING}
_IN_SERVICE = _SLOT_HOLDERS | {PREEMPTED}

_DEADLOCK_TICKS = 5000


class DeadlockError(RuntimeError):
    """No schedulable work is making progress while requests remain."""


class CapacityError(RuntimeError):
    """A single request cannot fit GPU memory even alone."""


class InvariantError(AssertionError):
    """A runtime invariant was violated (indicates an engine/policy bug)."""


@dataclass(frozen=True)
class SimConfig:
    gpu_mem_tokens: int
    max_batch: int
    cpu_mem_tokens: int | None = None  # default: 8x GPU capacity
    chunk_tokens: int = 512
    write_through: bool = True
    # Batch write-through plans until this many tokens are unsynced; keeps
    # transfer-event counts sane while residuals stay near-instant.
    write_through_min_tokens: int = 8
    overlap: bool = True
    offload: bool = True
    seed: int = 0  # carried for report provenance; the engine is RNG-free
    gamma_window_s: float = 5.0
    debug_checks: bool = True

    def __post_init__(self):
        if self.gpu_mem_tokens < 1:
            raise ValueError("gpu_mem_tokens must be >= 1")
        if self.max_batch < 1:
            raise ValueError("max_batch must be >= 1")
        if self.chunk_tokens < 1:
            raise ValueError("chunk_tokens must be >= 1")

    @property
    def cpu_mem(self) -> int:
        if self.cpu_mem_tokens is not None:
            return self.cpu_mem_tokens
        return 8 * self.gpu_mem_tokens


@dataclass
class LogEvent:
    time: float
    kind: str
    subject: int
    info: dict | None = None


@dataclass
class RequestRecord:
    """Complete per-request timeline, the input to all metrics."""

    request_id: int
    arrival: float
    prompt_len: int
    output_len: int
    consume_rate: float
    ttft: float | None = None
    gen_times: list[float] = field(default_factory=list)
    buffer_at_gen: list[int] = field(default_factory=list)
    consume_times: list[float] = field(default_factory=list)
    rebuffer_s: float = 0.0
    gen_done_time: float | None = None
    done_time: float | None = None
    preemptions: int = 0
    resumes: int = 0
    recomputes: int = 0

    @property
    def inter_token_latencies(self) -> list[float]:
        return [b - a for a, b in zip(self.gen_times, self.gen_times[1:])]


@dataclass
class SimResult:
    policy: str
    records: list[RequestRecord]
    event_log: list[LogEvent]
    decision_log: list[dict]
    total_time: float
    total_preemptions: int
    total_recomputes: int
    mode_changes: list[tuple[float, str]]

    def record(self, request_id: int) -> RequestRecord:
        return self.records[request_id]

    def event_hash(self) -> str:
        h = hashlib.sha256()
        for ev in self.event_log:
            h.update(f"{ev.time:.9f}|{ev.kind}|{ev.subject}\n".encode())
        return h.hexdigest()

    def events_jsonl(self) -> str:
        lines = []
        for ev in self.event_log:
            row = {"time": round(ev.time, 9), "kind": ev.kind, "subject": ev.subject}
            if ev.info:
                row.update(ev.info)
            lines.append(json.dumps(row, sort_keys=True))
        return "\n".join(lines) + "\n"


@dataclass
class _PrefillJob:
    members: tuple[int, ...]
    process_tokens: int  # tokens pushed through the prefill pipeline
    reserve: dict[int, int]  # per-member GPU tokens claimed at job start
    kind: str  # initial | recompute | chunk
    emits_first_token: bool


@dataclass
class _RequestState:
    spec: object
    status: str = WAITING
    generated: int = 0
    consumed: int = 0
    stalled_since: float | None = None
    kv: KvResidency | None = None
    busy_since_tick: float = 0.0
    last_iter_time: float | None = None
    chunks_remaining: list[int] = field(default_factory=list)
    load_outstanding: int = 0
    record: RequestRecord | None = None

    def __post_init__(self):
        self.kv = KvResidency(request_id=self.spec.id)
        self.record = RequestRecord(
            request_id=self.spec.id,
            arrival=self.spec.arrival_time,
            prompt_len=self.spec.prompt_len,
            output_len=self.spec.output_len,
            consume_rate=self.spec.consume_rate,
        )

    @property
    def rid(self) -> int:
        return self.spec.id

    @property
    def buffer(self) -> int:
        return self.generated - self.consumed

    @property
    def gen_complete(self) -> bool:
        return self.generated >= self.spec.output_len


class _Channel:
    """One PCIe direction: FIFO queue, at most one chunk in service."""

    def __init__(self, direction: str):
        self.direction = direction
        self.queue: deque[Chunk] = deque()
        self.in_service: Chunk | None = None
        self.service_started: float = 0.0

    def has_kind(self, kind: str) -> bool:
        if self.in_service is not None and self.in_service.kind == kind:
            return True
        return any(c.kind == kind for c in self.queue)


def estimate_throughput_capacity(
    history: deque,
    now: float,
    window_s: float = 5.0,
    nominal: float = 0.0,
) -> float:
    """Tokens/second generated over the recent window of virtual time.

    ``history`` holds (completion_time, tokens) pairs.  Before any iteration
    completes (or when the window is empty) the nominal fallback applies.
    """
    cutoff = now - window_s
    tokens = sum(n for t, n in history if t > cutoff)
    span = min(window_s, now)
    if tokens <= 0 or span <= 0:
        return nominal
    return tokens / span


class Engine:
    def __init__(self, trace: Trace, policy: Policy | str, cm: CostModel, sim: SimConfig):
        self.trace = trace
        self.policy = make_policy(policy) if isinstance(policy, str) else policy
        self.cm = cm
        self.sim = sim
        self.now = 0.0
        self._heap: list[tuple[float, int, int, int]] = []
        self._seq = 0
        self._payload: dict[int, tuple] = {}
        self.state: dict[int, _RequestState] = {
            r.id: _RequestState(spec=r) for r in trace.requests
        }
        self.waiting: list[int] = []  # arrival order
        self.running: set[int] = set()
        self.prefill_queue: deque[_PrefillJob] = deque()
        self.gpu_job: object | None = None
        self.gpu_extra_delay = 0.0
        self._last_gpu_kind: str | None = None
        self.mem_used = 0
        # Tokens promised to queued prefill/recompute jobs; decode growth and
        # new commitments may not eat into this reserve.
        self.mem_committed = 0
        self._commitments: dict[int, int] = {}
        self.d2h = _Channel("d2h")
        self.h2d = _Channel("h2d")
        self.measured_d2h = 0.0
        self.measured_h2d = 0.0
        self.token_history: deque = deque()
        self.prefill_window: deque = deque(maxlen=20)
        self.event_log: list[LogEvent] = []
        self.decision_log: list[dict] = []
        self.live = len(trace.requests)
        self.last_tick_fired = -1e18
        self._ticks_since_progress = 0
        self.total_preemptions = 0
        self.total_recomputes = 0
        self._last_event_time = 0.0

        for r in trace.requests:
            if r.prompt_len + r.output_len > sim.gpu_mem_tokens:
                raise CapacityError(
                    f"request {r.id} needs {r.prompt_len + r.output_len} KV tokens, "
                    f"GPU holds {sim.gpu_mem_tokens}"
                )

    # -- event plumbing ------------------------------------------------------

    def _push(self, time: float, kind: str, subject: int, payload: tuple = ()):
        self._seq += 1
        heapq.heappush(self._heap, (time, _KIND_RANK[kind], subject, self._seq))
        self._payload[self._seq] = (kind, payload)

    def _log(self, time: float, kind: str, subject: int, info: dict | None = None):
        self.event_log.append(LogEvent(time, kind, subject, info))

    # -- memory ledger ---------------------------------------------------------

    def _mem_free(self) -> int:
        return self.sim.gpu_mem_tokens - self.mem_used

    def _mem_acquire(self, tokens: int) -> None:
        self.mem_used += tokens
        if self.sim.debug_checks and self.mem_used > self.sim.gpu_mem_tokens:
            raise InvariantError(
                f"GPU memory overflow: {self.mem_used} > {self.sim.gpu_mem_tokens}"
            )

    def _mem_release(self, tokens: int) -> None:
        self.mem_used -= tokens
        if self.sim.debug_checks and self.mem_used < 0:
            raise InvariantError("GPU memory ledger went negative")

    def _commit(self, rid: int, tokens: int) -> None:
        self.mem_committed += tokens
        self._commitments[rid] = self._commitments.get(rid, 0) + tokens

    def _uncommit(self, rid: int, tokens: int) -> None:
        take = min(tokens, self._commitments.get(rid, 0))
        self.mem_committed -= take
        remaining = self._commitments.get(rid, 0) - take
        if remaining:
            self._commitments[rid] = remaining
        else:
            self._commitments.pop(rid, None)

    def _queued_h2d_tokens(self) -> int:
        return sum(c.tokens for c in self.h2d.queue)

    def _growth_budget(self) -> int:
        """GPU tokens decode may grow into without starving queued restores."""
        return (
            self.sim.gpu_mem_tokens
            - self.mem_used
            - self.mem_committed
            - self._queued_h2d_tokens()
        )

    # -- run loop ----------------------------------------------------------------

    def run(self) -> SimResult:
        for r in self.trace.requests:
            self._push(r.arrival_time, ARRIVAL, r.id)
        self._push(0.0, SCHEDULE_TICK, -1)

        while self._heap:
            time, _rank, subject, seq = heapq.heappop(self._heap)
            kind, payload = self._payload.pop(seq)
            if self.sim.debug_checks and time < self.now - 1e-12:
                raise InvariantError(f"clock moved backwards: {time} < {self.now}")
            self.now = max(self.now, time)
            self._last_event_time = self.now
            getattr(self, f"_on_{kind}")(time, subject, *payload)
            if self.sim.debug_checks:
                self._audit_memory()
            if self.live == 0:
                break
        if self.live > 0:
            raise DeadlockError(
                f"{self.live} requests incomplete but no runnable events remain"
            )
        return self._finish()

    def _finish(self) -> SimResult:
        records = [self.state[r.id].record for r in self.trace.requests]
        if self.sim.debug_checks:
            self._final_invariants(records)
        mode_changes = list(getattr(self.policy, "mode_changes", []))
        return SimResult(
            policy=self.policy.name,
            records=records,
            event_log=self.event_log,
            decision_log=self.decision_log,
            total_time=self._last_event_time,
            total_preemptions=self.total_preemptions,
            total_recomputes=self.total_recomputes,
            mode_changes=mode_changes,
        )

    def _audit_memory(self) -> None:
        """Cross-check the ledger against per-request residency at an event boundary."""
        resident = sum(s.kv.gpu_resident for s in self.state.values())
        in_flight = 0
        if isinstance(self.gpu_job, _PrefillJob):
            in_flight += sum(self.gpu_job.reserve.values())
        if self.h2d.in_service is not None:
            in_flight += self.h2d.in_service.tokens
        if resident + in_flight != self.mem_used:
            raise InvariantError(
                f"memory ledger drift: resident {resident} + in-flight {in_flight} "
                f"!= ledger {self.mem_used}"
            )
        if self.mem_used > self.sim.gpu_mem_tokens:
            raise InvariantError("resident KV exceeds GPU capacity")

    def _final_invariants(self, records: list[RequestRecord]) -> None:
        for rec in records:
            st = self.state[rec.request_id]
            if not (st.generated == st.consumed == rec.output_len):
                raise InvariantError(
                    f"request {rec.request_id}: conservation violated "
                    f"(generated={st.generated}, consumed={st.consumed}, L={rec.output_len})"
                )
            if len(rec.gen_times) != rec.output_len:
                raise InvariantError(f"request {rec.request_id}: token timeline incomplete")
            for a, b in zip(rec.gen_times, rec.gen_times[1:]):
                if b < a:
                    raise InvariantError(f"request {rec.request_id}: gen_times not monotone")
            if len(rec.consume_times) != rec.output_len:
                raise InvariantError(f"request {rec.request_id}: consume timeline incomplete")
            for j, (g, c) in enumerate(zip(rec.gen_times, rec.consume_times)):
                if c < g - 1e-9:
                    raise InvariantError(
                        f"request {rec.request_id}: token {j} consumed before generated"
                    )

    # -- handlers --------------------------------------------------------------

    def _on_arrival(self, time: float, rid: int):
        st = self.state[rid]
        st.status = WAITING
        self.waiting.append(rid)
        self._log(time, ARRIVAL, rid)
        self._opportunistic(time)
        self._dispatch_gpu(time)

    def _on_schedule_tick(self, time: float, _subject: int):
        if any(not s.gen_complete for s in self.state.values()):
            self._push(time + self.policy.cfg.schedule_interval, SCHEDULE_TICK, -1)
        drains = [
            s.buffer / s.spec.consume_rate
            for s in self.state.values()
            if s.status in _IN_SERVICE and not s.gen_complete
        ]
        if not should_tick(time, self.last_tick_fired, len(self.waiting), drains, self.policy.cfg):
            return
        self.last_tick_fired = time
        view = self._snapshot(time)
        decision = self.policy.on_tick(view)
        for st in self.state.values():
            st.busy_since_tick = 0.0
        self._apply_preempts(time, decision.preempt)
        self._apply_resumes(time, decision.resume)
        self._apply_prefills(time, decision.prefill_batches)
        entry = {"time": time}
        entry.update(decision.log or {"mode": decision.mode})
        self.decision_log.append(entry)
        self._log(time, SCHEDULE_TICK, -1, {k: v for k, v in entry.items() if k != "time"})
        self.gpu_extra_delay += self.cm.schedule_tick_cost
        self._ticks_since_progress += 1
        if self._ticks_since_progress > _DEADLOCK_TICKS:
            raise DeadlockError("scheduler keeps ticking but no request makes progress")
        self._retry_channels(time)
        self._dispatch_gpu(time)

    def _on_prefill_done(self, time: float, _subject: int, job: _PrefillJob, duration: float):
        self.gpu_job = None
        self._last_gpu_kind = "prefill"
        self.prefill_window.append((job.process_tokens, duration))
        for rid in job.members:
            st = self.state[rid]
            reserve = job.reserve[rid]
            st.kv.gpu_resident += reserve
            if job.kind != "recompute":
                st.kv.total_kv += reserve
            self._log(time, PREFILL_DONE, rid, {"kind": job.kind})
            if job.kind == "chunk" and not job.emits_first_token:
                st.status = PREFILL_WAIT
                self._enqueue_next_chunk(rid)
                continue
            st.status = RUNNING
            self.running.add(rid)
            if job.kind == "recompute":
                st.record.resumes += 1
            else:
                self._append_token(time, st)
                st.record.ttft = time
                self._push(time, CONSUME, rid)  # reader starts at the first token
        self._plan_write_through(time)
        self._dispatch_gpu(time)

    def _on_decode_iter_done(
        self, time: float, _subject: int, batch: tuple[int, ...], iter_time: float
    ):
        self.gpu_job = None
        self._last_gpu_kind = "decode"
        finished: list[int] = []
        produced = 0
        for rid in batch:
            st = self.state[rid]
            if st.status != RUNNING or st.gen_complete:
                continue  # preempted or rescheduled mid-iteration
            self._mem_acquire(1)
            st.kv.total_kv += 1
            st.kv.gpu_resident += 1
            self._append_token(time, st)
            st.busy_since_tick += iter_time
            st.last_iter_time = iter_time
            produced += 1
            if st.gen_complete:
                finished.append(rid)
        if produced:
            self.token_history.append((time, produced))
            self._ticks_since_progress = 0
            cutoff = time - self.sim.gamma_window_s
            while self.token_history and self.token_history[0][0] <= cutoff:
                self.token_history.popleft()
        self._log(time, DECODE_ITER_DONE, min(batch), {"batch": list(batch), "tokens": produced})
        for rid in finished:
            self._push(time, REQUEST_DONE, rid)
        self._plan_write_through(time)
        self._dispatch_gpu(time)

    def _on_request_done(self, time: float, rid: int):
        """Generation finished: release the slot and all GPU-side KV."""
        st = self.state[rid]
        if st.record.gen_done_time is not None:
            return
        st.record.gen_done_time = time
        if st.status == RUNNING:
            st.status = GEN_DONE
        self.running.discard(rid)
        self._mem_release(st.kv.gpu_resident)
        st.kv.gpu_resident = 0
        self._purge_queued_chunks(rid)
        self._log(time, REQUEST_DONE, rid)
        self._retry_channels(time)
        self._opportunistic(time)
        self._dispatch_gpu(time)

    def _on_consume(self, time: float, rid: int):
        st = self.state[rid]
        if st.status == DONE:
            return
        if st.consumed < st.generated:
            self._consume_token(time, st)
            if st.status != DONE:
                self._push(time + 1.0 / st.spec.consume_rate, CONSUME, rid)
        else:
            # Reader found an empty buffer: stall until the next token lands.
            st.stalled_since = time

    def _on_chunk_transfer_done(self, time: float, _subject: int, direction: str):
        channel = self.d2h if direction == "d2h" else self.h2d
        chunk = channel.in_service
        channel.in_service = None
        duration = max(time - channel.service_started, 1e-12)
        rate = chunk.tokens / duration
        if direction == "d2h":
            self.measured_d2h = update_rate_ema(self.measured_d2h, rate)
        else:
            self.measured_h2d = update_rate_ema(self.measured_h2d, rate)
        st = self.state[chunk.owner]
        self._log(
            time,
            CHUNK_TRANSFER_DONE,
            chunk.owner,
            {
                "direction": direction,
                "owner": chunk.owner,
                "tokens": chunk.tokens,
                "queued_at": round(chunk.queued_at, 9),
                "started_at": round(channel.service_started, 9),
                "done_at": round(time, 9),
                "kind": chunk.kind,
            },
        )
        alive = st.status not in (GEN_DONE, DONE)
        if direction == "d2h":
            if alive:
                prev = st.kv.cpu_synced
                st.kv.cpu_synced = min(st.kv.total_kv, st.kv.cpu_synced + chunk.tokens)
                if self.sim.debug_checks and st.kv.cpu_synced < prev:
                    raise InvariantError("write-through pointer decreased")
                st.kv.inflight_d2h = max(0, st.kv.inflight_d2h - chunk.tokens)
                if chunk.kind == "evict":
                    st.kv.gpu_resident = max(0, st.kv.gpu_resident - chunk.tokens)
                    self._mem_release(chunk.tokens)
        else:
            # In-service reservation becomes resident KV; ledger total is flat.
            st.kv.gpu_resident += chunk.tokens
            st.kv.inflight_h2d = max(0, st.kv.inflight_h2d - chunk.tokens)
            st.load_outstanding -= 1
            if st.load_outstanding == 0 and st.status == LOADING:
                st.status = RUNNING
                self.running.add(chunk.owner)
                st.record.resumes += 1
        self._retry_channels(time)
        self._dispatch_gpu(time)

    # -- token and consumption bookkeeping ---------------------------------------

    def _consume_token(self, time: float, st: _RequestState):
        st.consumed += 1
        st.record.consume_times.append(time)
        if self.sim.debug_checks and st.consumed > st.generated:
            raise InvariantError(f"request {st.rid}: consumed ran ahead of generated")
        self._log(time, CONSUME, st.rid)
        if st.consumed >= st.spec.output_len:
            st.status = DONE
            st.record.done_time = time
            self.live -= 1

    def _append_token(self, time: float, st: _RequestState):
        self._ticks_since_progress = 0
        st.generated += 1
        st.record.gen_times.append(time)
        st.record.buffer_at_gen.append(st.generated - st.consumed)
        if st.record.ttft is None:
            st.record.ttft = time
        if st.stalled_since is not None:
            st.record.rebuffer_s += time - st.stalled_since
            st.stalled_since = None
            self._consume_token(time, st)
            if st.status != DONE:
                self._push(time + 1.0 / st.spec.consume_rate, CONSUME, st.rid)

    # -- GPU dispatch ---------------------------------------------------------------

    def _contention(self) -> bool:
        if self.waiting:
            return True
        return any(
            s.status in (PREEMPTED, LOADING, RECOMPUTING) for s in self.state.values()
        )

    def _decode_candidates(self) -> list[int]:
        candidates = sorted(
            rid
            for rid in self.running
            if self.state[rid].status == RUNNING and not self.state[rid].gen_complete
        )
        if not candidates:
            return []
        triples = [
            (rid, self.state[rid].buffer, self.state[rid].spec.consume_rate)
            for rid in candidates
        ]
        return sorted(self.policy.iteration_batch(triples, self._contention()))

    def _dispatch_gpu(self, time: float):
        if self.gpu_job is not None:
            return
        start = time + self.gpu_extra_delay
        prefer_decode = (
            self.policy.interleave_prefill_chunks
            and self._last_gpu_kind == "prefill"
            and bool(self._decode_candidates())
        )
        if self.prefill_queue and not prefer_decode:
            job = self.prefill_queue[0]
            need = sum(job.reserve.values())
            if need <= self._mem_free():
                self.prefill_queue.popleft()
                self.gpu_extra_delay = 0.0
                for rid in job.members:
                    self._uncommit(rid, job.reserve[rid])
                    if self.state[rid].status == PREFILL_WAIT:
                        self.state[rid].status = PREFILLING
                self._mem_acquire(need)
                duration = job.process_tokens * self.cm.prefill_per_token
                self.gpu_job = job
                self._push(start + duration, PREFILL_DONE, min(job.members), (job, duration))
                return
        chosen = self._decode_candidates()
        if not chosen:
            return
        # Each member adds one KV token this iteration; shed load if growing
        # would eat memory reserved for queued loads and prefills.
        free = max(0, self._growth_budget())
        if len(chosen) > free:
            chosen = self._shed_for_memory(time, chosen, free)
        if not chosen:
            return
        self.gpu_extra_delay = 0.0
        batch = tuple(chosen)
        total_ctx = sum(self.state[rid].kv.total_kv for rid in batch)
        iter_time = decode_iteration_time(len(batch), total_ctx, self.cm)
        self.gpu_job = ("decode", batch)
        self._push(start + iter_time, DECODE_ITER_DONE, min(batch), (batch, iter_time))

    def _shed_for_memory(self, time: float, chosen: list[int], free: int) -> list[int]:
        if self.policy.exhaustion_action == "pace":
            # Pace out the fattest buffers; their readers can coast.
            order = sorted(chosen, key=lambda rid: (-self.state[rid].buffer, rid))
            return sorted(order[len(order) - free :]) if free > 0 else []
        # Baselines evict the most recently arrived requests outright
        # (memory-exhaustion preemption; they return via recompute).
        order = sorted(
            chosen, key=lambda rid: (self.state[rid].spec.arrival_time, rid)
        )
        keep = order[:free]
        for rid in order[free:]:
            st = self.state[rid]
            st.status = PREEMPTED
            self.running.discard(rid)
            st.record.preemptions += 1
            self.total_preemptions += 1
            self._purge_queued_chunks(rid)
            inflight = self._in_service_evict_tokens(rid)
            self._mem_release(st.kv.gpu_resident - inflight)
            st.kv.gpu_resident = inflight
            st.kv.cpu_synced = 0
        return sorted(keep)

    # -- transfers ---------------------------------------------------------------

    def _enqueue_chunk(self, time: float, chunk: Chunk):
        channel = self.d2h if chunk.direction == "d2h" else self.h2d
        channel.queue.append(chunk)
        self._start_channel(time, channel)

    def _start_channel(self, time: float, channel: _Channel):
        if channel.in_service is not None or not channel.queue:
            return
        head = channel.queue[0]
        if channel.direction == "h2d":
            if not self.sim.overlap and self.d2h.has_kind("evict"):
                return  # serialized baseline: every eviction lands first
            if head.tokens > self._mem_free() - self.mem_committed:
                return  # wait for evictions/completions to free memory
            self._mem_acquire(head.tokens)
        channel.queue.popleft()
        channel.in_service = head
        channel.service_started = time
        duration = transfer_time(head.tokens, channel.direction, self.cm)
        self._push(time + duration, CHUNK_TRANSFER_DONE, head.owner, (channel.direction,))

    def _retry_channels(self, time: float):
        self._start_channel(time, self.d2h)
        self._start_channel(time, self.h2d)

    def _purge_queued_chunks(self, rid: int):
        st = self.state[rid]
        for channel in (self.d2h, self.h2d):
            kept: deque[Chunk] = deque()
            for c in channel.queue:
                if c.owner != rid:
                    kept.append(c)
                elif c.direction == "d2h":
                    st.kv.inflight_d2h = max(0, st.kv.inflight_d2h - c.tokens)
                else:
                    st.kv.inflight_h2d = max(0, st.kv.inflight_h2d - c.tokens)
                    st.load_outstanding = max(0, st.load_outstanding - 1)
            channel.queue = kept

    def _in_service_evict_tokens(self, rid: int) -> int:
        c = self.d2h.in_service
        if c is not None and c.owner == rid and c.kind == "evict":
            return c.tokens
        return 0

    def _plan_write_through(self, time: float):
        if not (
            self.sim.write_through
            and self.sim.offload
            and self.policy.uses_kv_hierarchy
        ):
            return
        pending: dict[int, int] = {}
        buffers: dict[int, int] = {}
        floor = self.sim.write_through_min_tokens
        for rid in sorted(self.running):
            st = self.state[rid]
            if st.status != RUNNING:
                continue
            unsynced = st.kv.unsynced
            # Fresh prompts sync at once; decode tails batch up to the floor.
            if unsynced >= floor or (unsynced > 0 and st.kv.cpu_synced == 0):
                pending[rid] = unsynced
                buffers[rid] = st.buffer
        if not pending:
            return
        batch = self._decode_candidates()
        if batch:
            total_ctx = sum(self.state[r].kv.total_kv for r in batch)
            interval = decode_iteration_time(len(batch), total_ctx, self.cm)
        else:
            interval = self.policy.cfg.schedule_interval
        for rid, tokens in plan_write_chunk(pending, interval, self.cm, buffers):
            self.state[rid].kv.inflight_d2h += tokens
            self._enqueue_chunk(
                time,
                Chunk(owner=rid, tokens=tokens, direction="d2h", kind="writethrough", queued_at=time),
            )

    # -- decision application -------------------------------------------------------

    def _apply_preempts(self, time: float, rids: list[int]):
        for rid in rids:
            st = self.state[rid]
            if st.status != RUNNING:
                continue
            self.running.discard(rid)
            st.status = PREEMPTED
            st.record.preemptions += 1
            self.total_preemptions += 1
            self._purge_queued_chunks(rid)  # superseded write-through plans
            if not self.sim.offload or not self.policy.uses_kv_hierarchy:
                # No hierarchy: discard GPU state, recompute later.
                inflight = self._in_service_evict_tokens(rid)
                self._mem_release(st.kv.gpu_resident - inflight)
                st.kv.gpu_resident = inflight
                st.kv.cpu_synced = 0
                continue
            in_flight_wt = (
                self.d2h.in_service.tokens
                if self.d2h.in_service is not None and self.d2h.in_service.owner == rid
                else 0
            )
            plan = plan_preempt(st.kv)
            self._mem_release(plan.instant_release)
            st.kv.gpu_resident -= plan.instant_release
            residual = max(0, plan.residual_d2h - in_flight_wt)
            for tokens in split_chunks(residual, self.sim.chunk_tokens):
                st.kv.inflight_d2h += tokens
                self._enqueue_chunk(
                    time,
                    Chunk(owner=rid, tokens=tokens, direction="d2h", kind="evict", queued_at=time),
                )

    def _apply_resumes(self, time: float, resumes: list[tuple[int, str]]):
        for rid, how in resumes:
            st = self.state[rid]
            if st.status != PREEMPTED:
                continue
            if (
                how == "load"
                and self.sim.offload
                and self.policy.uses_kv_hierarchy
                and st.kv.resumable
            ):
                in_service = self._in_service_evict_tokens(rid)
                effective_resident = st.kv.gpu_resident - in_service
                missing = st.kv.total_kv - effective_resident
                capacity = (
                    self.sim.gpu_mem_tokens
                    - self.mem_committed
                    - self._queued_h2d_tokens()
                    - effective_resident
                )
                if missing > capacity:
                    continue  # does not fit yet; the next tick retries
                # Cancel queued evictions: those tokens stay resident and the
                # in-service chunk (uncancelable) is loaded back afterwards.
                self._purge_queued_chunks(rid)
                if missing <= 0:
                    st.status = RUNNING
                    self.running.add(rid)
                    st.record.resumes += 1
                    continue
                st.status = LOADING
                chunks = split_chunks(missing, self.sim.chunk_tokens)
                st.load_outstanding = len(chunks)
                for tokens in chunks:
                    st.kv.inflight_h2d += tokens
                    self._enqueue_chunk(
                        time,
                        Chunk(owner=rid, tokens=tokens, direction="h2d", kind="load", queued_at=time),
                    )
            else:
                # Recompute: drop GPU-side state and re-prefill the context.
                inflight = self._in_service_evict_tokens(rid)
                released = st.kv.gpu_resident - inflight
                available = (
                    self.sim.gpu_mem_tokens
                    - self.mem_used
                    - self.mem_committed
                    - self._queued_h2d_tokens()
                    + released
                )
                if st.kv.total_kv > available:
                    continue  # cannot reserve the recompute footprint yet
                self._purge_queued_chunks(rid)
                self._mem_release(released)
                st.kv.gpu_resident = inflight
                st.status = RECOMPUTING
                st.record.recomputes += 1
                self.total_recomputes += 1
                self._commit(rid, st.kv.total_kv)
                self.prefill_queue.append(
                    _PrefillJob(
                        members=(rid,),
                        process_tokens=st.kv.total_kv,
                        reserve={rid: st.kv.total_kv},
                        kind="recompute",
                        emits_first_token=False,
                    )
                )

    def _apply_prefills(self, time: float, batches: list[list[int]]):
        for batch in batches:
            members = []
            for rid in batch:
                if self.state[rid].status != WAITING:
                    continue
                need = self.state[rid].spec.prompt_len + 1
                budget = (
                    self.sim.gpu_mem_tokens
                    - self.mem_used
                    - self.mem_committed
                    - self._queued_h2d_tokens()
                )
                if need > budget:
                    continue  # stays waiting; a later tick admits it
                self._commit(rid, need)
                members.append(rid)
            if not members:
                continue
            chunk_size = self.policy.prefill_chunk_tokens()
            for rid in members:
                self.waiting.remove(rid)
                self.state[rid].status = PREFILL_WAIT
            if chunk_size is None:
                self.prefill_queue.append(
                    _PrefillJob(
                        members=tuple(members),
                        process_tokens=sum(self.state[r].spec.prompt_len for r in members),
                        reserve={r: self.state[r].spec.prompt_len + 1 for r in members},
                        kind="initial",
                        emits_first_token=True,
                    )
                )
            else:
                for rid in members:
                    st = self.state[rid]
                    st.chunks_remaining = list(split_chunks(st.spec.prompt_len, chunk_size))
                    self._enqueue_next_chunk(rid)

    def _enqueue_next_chunk(self, rid: int):
        st = self.state[rid]
        if not st.chunks_remaining:
            return
        tokens = st.chunks_remaining.pop(0)
        final = not st.chunks_remaining
        self.prefill_queue.append(
            _PrefillJob(
                members=(rid,),
                process_tokens=tokens,
                reserve={rid: tokens + (1 if final else 0)},
                kind="chunk",
                emits_first_token=final,
            )
        )

    # -- policy interaction -----------------------------------------------------------

    def _opportunistic(self, time: float):
        view = self._snapshot(time)
        decision = self.policy.opportunistic(view)
        self._apply_resumes(time, decision.resume)
        self._apply_prefills(time, decision.prefill_batches)

    def _tq_state(self) -> TransferQueueState:
        tq = TransferQueueState(
            measured_d2h_rate=self.measured_d2h,
            measured_h2d_rate=self.measured_h2d,
        )
        for channel, queue in ((self.d2h, tq.d2h_queue), (self.h2d, tq.h2d_queue)):
            if channel.in_service is not None:
                queue.append(channel.in_service)
            queue.extend(channel.queue)
        return tq

    def _snapshot(self, time: float) -> SystemSnapshot:
        tq = self._tq_state()
        d2h_rate = self.measured_d2h or self.cm.d2h_bandwidth
        h2d_rate = self.measured_h2d or self.cm.h2d_bandwidth
        d2h_backlog = tq.queued_tokens("d2h") / d2h_rate
        h2d_backlog = tq.queued_tokens("h2d") / h2d_rate
        prefill_rate = self._prefill_s_per_token()
        members = []
        for rid in sorted(self.state):
            st = self.state[rid]
            if st.status not in _IN_SERVICE or st.gen_complete:
                continue
            members.append(
                MemberView(
                    request_id=rid,
                    arrival_time=st.spec.arrival_time,
                    rate=st.spec.consume_rate,
                    prompt_len=st.spec.prompt_len,
                    output_len=st.spec.output_len,
                    generated=st.generated,
                    consumed=st.consumed,
                    ctx_tokens=st.kv.total_kv,
                    gpu_resident=st.kv.gpu_resident,
                    releasable_now=min(st.kv.gpu_resident, st.kv.cpu_synced),
                    running=st.status == RUNNING,
                    pinned=st.status in _PINNED,
                    busy_since_tick=st.busy_since_tick,
                    tau_evict=d2h_backlog + st.kv.unsynced / d2h_rate,
                    tau_load=h2d_backlog + st.kv.total_kv / h2d_rate,
                    t_io=io_overhead_estimate(st.kv, tq, self.cm),
                    t_recompute=prefill_rate * st.kv.total_kv,
                    last_iter_time=st.last_iter_time,
                )
            )
        waiting = [
            WaitingView(
                request_id=rid,
                arrival_time=self.state[rid].spec.arrival_time,
                prompt_len=self.state[rid].spec.prompt_len,
                output_len=self.state[rid].spec.output_len,
                rate=self.state[rid].spec.consume_rate,
                waited_s=time - self.state[rid].spec.arrival_time,
            )
            for rid in self.waiting
        ]
        slot_holders = sum(
            1
            for s in self.state.values()
            if s.status in _SLOT_HOLDERS and not s.gen_complete
        )
        h2d_blocked = 0
        if self.h2d.in_service is None and self.h2d.queue:
            head = self.h2d.queue[0]
            if head.tokens > self._mem_free() - self.mem_committed:
                h2d_blocked = head.tokens
        return SystemSnapshot(
            now=time,
            members=members,
            waiting=waiting,
            free_slots=self.sim.max_batch - slot_holders,
            gpu_mem_free=self._growth_budget(),
            gpu_mem_total=self.sim.gpu_mem_tokens,
            cpu_mem_total=self.sim.cpu_mem,
            max_batch=self.sim.max_batch,
            gamma=self._gamma(time),
            prefill_s_per_token=prefill_rate,
            offload_enabled=self.sim.offload,
            h2d_blocked_tokens=h2d_blocked,
        )

    def _prefill_s_per_token(self) -> float:
        if not self.prefill_window:
            return self.cm.prefill_per_token
        tokens = sum(t for t, _ in self.prefill_window)
        seconds = sum(d for _, d in self.prefill_window)
        return seconds / tokens if tokens else self.cm.prefill_per_token

    def _nominal_gamma(self, batch: int, ctx: int) -> float:
        return batch / decode_iteration_time(batch, max(ctx, batch), self.cm)

    def _gamma(self, time: float) -> float:
        running = [rid for rid in self.running if self.state[rid].status == RUNNING]
        if running:
            ctx = sum(self.state[r].kv.total_kv for r in running)
            nominal = self._nominal_gamma(len(running), ctx)
        else:
            b = self.sim.max_batch
            nominal = self._nominal_gamma(b, b)
        measured = estimate_throughput_capacity(
            self.token_history, time, self.sim.gamma_window_s, nominal=0.0
        )
        # The measured rate dips while pacing idles the GPU on purpose, so
        # capacity is floored at what the current batch could sustain.
        return max(measured, nominal)


def run(trace: Trace, policy: Policy | str, cm: CostModel, sim: SimConfig) -> SimResult:
    """Simulate a trace to completion under the given policy."""
    return Engine(trace, policy, cm, sim).run()
