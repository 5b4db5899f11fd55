"""Request scheduling policies.

The centerpiece is the buffer-aware policy (CLI name ``tokenflow``): a
two-step scheduler that first determines the working set (how many requests
to keep in service, possibly beyond GPU capacity via CPU offload) and then
balances client buffers inside it, preempting requests whose readers can
coast on already-delivered tokens to make room for requests about to stall
or still waiting for their first token.

Alongside it live three baselines: strict FCFS with conservative memory
reservation, FCFS with chunked prefill, and a QoE-style scheduler that
prioritizes by buffer drain time but pays full recompute cost on every
resume.

All decision functions are pure over a snapshot of engine state; the only
policy-owned state is per-request moving averages and the current mode flag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .metrics import QosConfig, token_weight

BUFFER_AWARE = "buffer_aware"
FCFS_FALLBACK = "fcfs_fallback"

# Engagement threshold: a request queued longer than this bypasses batched
# prefill with a singleton sub-batch.
LATENCY_BYPASS_S = 1.3


@dataclass(frozen=True)
class SchedulerConfig:
    schedule_interval: float = 1.0  # seconds between reschedule opportunities
    per_request_mem_estimate: float = 1024.0  # beta, tokens
    workingset_adjust_rate: float = 0.5  # in [0, 1]
    buffer_safety_factor: float = 2.0  # admission conservativeness, >= 1
    penalty_weight: float = 0.5  # gamma on the low-buffer penalty
    tau_schedule: float = 1.0  # seconds charged for rescheduling latency
    critical_buffer_seconds: float = 1.0  # drain time that forces a resume
    max_batch: int | None = None  # None: engine's limit applies
    value_threshold_frac: float = 0.10  # token-value curve, mirrors QoS tau
    value_decay_alpha: float = 0.01
    pacing_buffer_seconds: float = 3.0  # generation ceiling under contention
    chunk_prefill_tokens: int = 256  # chunked-prefill baseline only
    ema_factor: float = 0.3

    def __post_init__(self):
        if self.schedule_interval <= 0:
            raise ValueError("schedule_interval must be > 0")
        if not 0.0 <= self.workingset_adjust_rate <= 1.0:
            raise ValueError("workingset_adjust_rate must be in [0, 1]")
        if self.buffer_safety_factor < 1.0:
            raise ValueError("buffer_safety_factor must be >= 1")
        if self.per_request_mem_estimate <= 0:
            raise ValueError("per_request_mem_estimate must be > 0")

    def value_config(self) -> QosConfig:
        return QosConfig(
            buffer_threshold_frac=self.value_threshold_frac,
            decay_alpha=self.value_decay_alpha,
        )


@dataclass(frozen=True)
class RequestPriorityView:
    """Scheduling inputs for one in-service request at a tick."""

    request_id: int
    b_rem: int  # unread tokens in the client buffer
    b_pred: float  # predicted buffer after the coming interval
    rate: float  # required consumption rate r_i, tokens/second
    value: float  # token value v_i in [0, 1]
    t_prime: float  # moving-average execution time estimate
    t_overhead: float  # min(I/O restore cost, recompute cost)
    phi: float  # low-buffer penalty, e^(-b/b_scale)
    utility: float  # v*max(t'-t_overhead,0) - gamma*phi


# --------------------------------------------------------------------------
# Pure decision functions


def buffer_penalty(b_rem: float, rate: float, schedule_interval: float) -> float:
    """Exponential starvation pressure, buffer measured in ticks of reading.

    The raw exponential over token counts vanishes numerically past a few
    dozen tokens, so the buffer is normalized by one interval's consumption.
    """
    scale = max(rate * schedule_interval, 1e-9)
    return math.exp(-max(b_rem, 0.0) / scale)


def build_priority_view(
    request_id: int,
    b_rem: int,
    rate: float,
    output_len: int,
    t_prime: float,
    t_overhead: float,
    expected_tokens: float,
    cfg: SchedulerConfig,
) -> RequestPriorityView:
    """Assemble the per-request utility inputs for one tick."""
    value = token_weight(b_rem, output_len, cfg.value_config())
    phi = buffer_penalty(b_rem, rate, cfg.schedule_interval)
    t_eff = max(t_prime - t_overhead, 0.0)
    utility = value * t_eff - cfg.penalty_weight * phi
    b_pred = max(
        b_rem + expected_tokens - rate * (cfg.schedule_interval + t_overhead), 0.0
    )
    return RequestPriorityView(
        request_id=request_id,
        b_rem=b_rem,
        b_pred=b_pred,
        rate=rate,
        value=value,
        t_prime=t_prime,
        t_overhead=t_overhead,
        phi=phi,
        utility=utility,
    )


def working_set_size(
    total_mem: float, per_request_estimate: float, n_running: int, cfg: SchedulerConfig
) -> int:
    """Number of requests the service rotation may hold.

    The static bound divides total (GPU plus host) capacity by the estimated
    per-request footprint; while fewer requests are running the bound is
    pulled toward the current load at the configured adjustment rate.
    Rounding is half-up and the result is clamped to [1, static bound].
    """
    if per_request_estimate <= 0:
        raise ValueError("per_request_estimate must be > 0")
    if total_mem < per_request_estimate:
        raise ValueError("total_mem must cover at least one request")
    w_static = int(total_mem // per_request_estimate)
    if n_running >= w_static:
        return max(1, w_static)
    adjusted = w_static - cfg.workingset_adjust_rate * (w_static - n_running)
    w_scheduled = int(math.floor(adjusted + 0.5))
    return max(1, min(w_scheduled, w_static))


def should_tick(
    now: float,
    last_tick: float,
    waiting_count: int,
    drain_times: list[float],
    cfg: SchedulerConfig,
) -> bool:
    """Whether a reschedule is worth running at this tick boundary.

    Requires the interval to have elapsed and either pending requests or an
    in-service request whose buffer drains within the critical horizon;
    otherwise the engine keeps its prefill-first fast path and skips the
    scheduling work.
    """
    if now - last_tick < cfg.schedule_interval:
        return False
    if waiting_count > 0:
        return True
    return any(d < cfg.critical_buffer_seconds for d in drain_times)


def admit(
    view: RequestPriorityView | None,
    tau_evict: float,
    tau_load: float,
    tau_schedule: float,
    cfg: SchedulerConfig,
) -> bool:
    """Buffer-coverage admission test.

    True when the request's unread buffer can feed its reader through a
    preempt/resume round-trip (eviction, reload, and one scheduling delay)
    inflated by the safety factor.  Requests that never ran have no buffer to
    protect; for them admission is governed solely by working-set room, so
    the test passes.
    """
    if view is None or view.b_rem is None:
        return True
    need = cfg.buffer_safety_factor * view.rate * (tau_evict + tau_load + tau_schedule)
    return view.b_rem >= need


def check_schedulability(rates: list[float], gamma: float) -> str:
    """Degrade to FCFS when demanded rates exceed estimated capacity."""
    return BUFFER_AWARE if sum(rates) <= gamma else FCFS_FALLBACK


def recompute_or_load(t_io: float, t_recompute: float) -> str:
    """Restore an evicted request by reload or recompute, whichever is faster.

    Ties go to load: reloading avoids occupying the compute pipeline and
    causes less memory churn.
    """
    return "recompute" if t_io > t_recompute else "load"


def _greedy_order(candidates: list[RequestPriorityView]) -> list[RequestPriorityView]:
    return sorted(
        candidates,
        key=lambda v: (-v.phi, -(v.value * v.t_prime), -v.rate, v.request_id),
    )


def _select_in_order(
    order: list[RequestPriorityView],
    gpu_mem: float,
    max_batch: int,
    lengths: dict[int, int],
) -> list[int]:
    chosen: list[int] = []
    used = 0.0
    for view in order:
        if len(chosen) >= max_batch:
            break
        need = lengths[view.request_id]
        if used + need <= gpu_mem:
            chosen.append(view.request_id)
            used += need
    return chosen


def select_batch(
    candidates: list[RequestPriorityView],
    gpu_mem: float,
    max_batch: int,
    lengths: dict[int, int],
) -> set[int]:
    """Pick the requests to run this interval.

    Greedy pass: sort by starvation pressure, then weighted token value, then
    required rate, and take everything that fits the memory and batch-size
    budgets.  Local-search pass: try adjacent swaps in the priority order and
    keep any that strictly improve the total utility of the induced feasible
    selection, until a full pass makes no change.
    """
    if max_batch < 0 or gpu_mem < 0:
        raise ValueError("budgets must be non-negative")
    order = _greedy_order(candidates)
    by_id = {v.request_id: v for v in candidates}

    def total_utility(ids: list[int]) -> float:
        return sum(by_id[i].utility for i in ids)

    best = _select_in_order(order, gpu_mem, max_batch, lengths)
    best_utility = total_utility(best)
    max_passes = max(1, len(order))
    for _ in range(max_passes):
        swapped = False
        for i in range(len(order) - 1):
            trial = order[:]
            trial[i], trial[i + 1] = trial[i + 1], trial[i]
            selection = _select_in_order(trial, gpu_mem, max_batch, lengths)
            utility = total_utility(selection)
            if utility > best_utility:
                order = trial
                best = selection
                best_utility = utility
                swapped = True
        if not swapped:
            break
    return set(best)


def greedy_batch_utility(
    candidates: list[RequestPriorityView],
    gpu_mem: float,
    max_batch: int,
    lengths: dict[int, int],
) -> float:
    """Utility of the greedy-only selection (before local search)."""
    by_id = {v.request_id: v for v in candidates}
    chosen = _select_in_order(_greedy_order(candidates), gpu_mem, max_batch, lengths)
    return sum(by_id[i].utility for i in chosen)


@dataclass(frozen=True)
class PrefillItem:
    request_id: int
    tokens: int
    waited_s: float = 0.0
    buffer_critical: bool = False


def partition_prefill(
    pending: list[PrefillItem], remaining_mem: float
) -> list[list[int]]:
    """Split pending prefills into sub-batches that fit remaining memory.

    Latency-critical items (buffer-critical, or queued beyond the engagement
    threshold) bypass batching as singleton sub-batches ahead of the rest;
    the remainder is packed greedily in order.  Items larger than the memory
    budget are left out entirely.
    """
    if remaining_mem < 0:
        raise ValueError("remaining_mem must be >= 0")
    urgent = [
        p for p in pending if p.buffer_critical or p.waited_s > LATENCY_BYPASS_S
    ]
    normal = [p for p in pending if p not in urgent]
    batches: list[list[int]] = []
    for item in urgent:
        if item.tokens <= remaining_mem:
            batches.append([item.request_id])
    current: list[int] = []
    used = 0.0
    for item in normal:
        if item.tokens > remaining_mem:
            continue
        if current and used + item.tokens > remaining_mem:
            batches.append(current)
            current = []
            used = 0.0
        current.append(item.request_id)
        used += item.tokens
    if current:
        batches.append(current)
    return batches


# --------------------------------------------------------------------------
# Engine-facing snapshot and decision records


@dataclass
class MemberView:
    """Engine-reported state of one admitted, generation-incomplete request."""

    request_id: int
    arrival_time: float
    rate: float
    prompt_len: int
    output_len: int
    generated: int
    consumed: int
    ctx_tokens: int  # current KV footprint (prompt + generated)
    gpu_resident: int
    releasable_now: int  # synced prefix that frees instantly on eviction
    running: bool
    pinned: bool  # mid-transition (prefill/load); not a decision candidate
    busy_since_tick: float  # decode seconds consumed since the last tick
    tau_evict: float
    tau_load: float
    t_io: float
    t_recompute: float
    last_iter_time: float | None

    @property
    def b_rem(self) -> int:
        return self.generated - self.consumed

    @property
    def drain_s(self) -> float:
        return self.b_rem / self.rate


@dataclass
class WaitingView:
    request_id: int
    arrival_time: float
    prompt_len: int
    output_len: int
    rate: float
    waited_s: float


@dataclass
class SystemSnapshot:
    now: float
    members: list[MemberView]
    waiting: list[WaitingView]
    free_slots: int
    gpu_mem_free: float  # allocatable budget: physical free minus reserves
    gpu_mem_total: float
    cpu_mem_total: float
    max_batch: int
    gamma: float
    prefill_s_per_token: float
    offload_enabled: bool
    h2d_blocked_tokens: int = 0  # head-of-queue load waiting on memory


@dataclass
class TickDecision:
    mode: str
    preempt: list[int] = field(default_factory=list)
    resume: list[tuple[int, str]] = field(default_factory=list)  # (id, load|recompute)
    prefill_batches: list[list[int]] = field(default_factory=list)
    log: dict = field(default_factory=dict)


@dataclass
class OpportunisticDecision:
    resume: list[tuple[int, str]] = field(default_factory=list)
    prefill_batches: list[list[int]] = field(default_factory=list)


# --------------------------------------------------------------------------
# Policies


class Policy:
    """Interface the engine drives; subclasses implement the decisions."""

    name = "abstract"
    interleave_prefill_chunks = False
    # Baselines have no hierarchical KV manager: no write-through mirror, no
    # reload path; evictions discard and resumes recompute.
    uses_kv_hierarchy = False

    def __init__(self, cfg: SchedulerConfig | None = None):
        self.cfg = cfg or SchedulerConfig()
        self.mode = BUFFER_AWARE

    def prefill_chunk_tokens(self) -> int | None:
        """Chunk size for prefill jobs, or None for whole-prompt prefill."""
        return None

    def on_tick(self, view: SystemSnapshot) -> TickDecision:
        raise NotImplementedError

    def opportunistic(self, view: SystemSnapshot) -> OpportunisticDecision:
        """Fast-path reaction to arrivals and freed capacity between ticks."""
        raise NotImplementedError

    def iteration_batch(
        self, running: list[tuple[int, int, float]], contention: bool
    ) -> list[int]:
        """Select which running requests join the next decode iteration.

        ``running`` holds (request_id, b_rem, rate) triples.  The default is
        work-conserving: everyone decodes.
        """
        return [rid for rid, _, _ in running]

    # How decode sheds load when KV growth would overflow memory: baselines
    # evict the most recent arrivals outright ("evict"); the buffer-aware
    # policy just skips fat-buffer members for the iteration ("pace").
    exhaustion_action = "evict"


def _restore_mode(m: MemberView, view: SystemSnapshot) -> str:
    if not view.offload_enabled:
        return "recompute"
    return recompute_or_load(m.t_io, m.t_recompute)


class BufferAwarePolicy(Policy):
    """Two-step buffer-aware preemptive scheduler (CLI name ``tokenflow``)."""

    name = "tokenflow"
    uses_kv_hierarchy = True

    def __init__(self, cfg: SchedulerConfig | None = None):
        super().__init__(cfg)
        self._t_prime: dict[int, float] = {}
        self.preemption_count = 0
        self.mode_changes: list[tuple[float, str]] = []

    # -- helpers ---------------------------------------------------------

    def _tprime(self, rid: int) -> float:
        return self._t_prime.get(rid, self.cfg.schedule_interval)

    def _update_tprime(self, members: list[MemberView]) -> None:
        for m in members:
            if m.running and not m.pinned:
                prev = self._tprime(m.request_id)
                self._t_prime[m.request_id] = prev + self.cfg.ema_factor * (
                    m.busy_since_tick - prev
                )

    def _overhead(self, m: MemberView, view: SystemSnapshot) -> float:
        if not view.offload_enabled:
            return m.t_recompute
        return min(m.t_io, m.t_recompute)

    def _view_of(self, m: MemberView, view: SystemSnapshot) -> RequestPriorityView:
        expected = 0.0
        if m.running and m.last_iter_time:
            expected = self.cfg.schedule_interval / m.last_iter_time
        return build_priority_view(
            request_id=m.request_id,
            b_rem=m.b_rem,
            rate=m.rate,
            output_len=m.output_len,
            t_prime=self._tprime(m.request_id),
            t_overhead=self._overhead(m, view),
            expected_tokens=expected,
            cfg=self.cfg,
        )

    def _safe_victim(self, m: MemberView, view: SystemSnapshot) -> bool:
        """May this running request be displaced without starving its reader?"""
        restore = self._overhead(m, view)
        pv = self._view_of(m, view)
        return admit(pv, restore, 0.0, self.cfg.tau_schedule, self.cfg)

    def set_mode(self, now: float, mode: str) -> None:
        if mode != self.mode:
            self.mode_changes.append((now, mode))
        self.mode = mode

    # -- decisions -------------------------------------------------------

    def on_tick(self, view: SystemSnapshot) -> TickDecision:
        members = [m for m in view.members if not m.pinned]
        running = [m for m in members if m.running]
        preempted = [m for m in members if not m.running]
        self._update_tprime(members)

        mode = check_schedulability([m.rate for m in view.members if m.running], view.gamma)
        self.set_mode(view.now, mode)
        if mode == FCFS_FALLBACK:
            return self._fallback_tick(view, members)

        decision = TickDecision(mode=mode)
        slots = view.free_slots
        mem = view.gpu_mem_free
        preempt_set: set[int] = set()
        resumed: set[int] = set()
        recomputed: list[int] = []

        def do_preempt(victim: MemberView) -> None:
            nonlocal slots, mem
            decision.preempt.append(victim.request_id)
            preempt_set.add(victim.request_id)
            self.preemption_count += 1
            slots += 1
            mem += victim.gpu_resident

        def do_resume(m: MemberView) -> None:
            nonlocal slots, mem
            how = _restore_mode(m, view)
            decision.resume.append((m.request_id, how))
            resumed.add(m.request_id)
            if how == "recompute":
                recomputed.append(m.request_id)
            slots -= 1
            mem -= m.ctx_tokens

        # 1) Rescue preempted requests whose buffers drain inside the
        #    critical horizon; they may displace the fattest runner even when
        #    that victim fails the safety test (a certain stall now outweighs
        #    a possible one later).
        criticals = sorted(
            (m for m in preempted if m.drain_s < self.cfg.critical_buffer_seconds),
            key=lambda m: (m.drain_s, m.request_id),
        )
        for m in criticals:
            if slots <= 0:
                # Only displace a runner whose reader can wait strictly
                # longer; swapping equally-starved requests is pure churn.
                candidates = [
                    r
                    for r in running
                    if r.request_id not in preempt_set and r.drain_s > m.drain_s
                ]
                if not candidates:
                    continue
                safe = [r for r in candidates if self._safe_victim(r, view)]
                pool = safe or candidates
                victim = max(pool, key=lambda r: (r.b_rem, -r.request_id))
                do_preempt(victim)
            do_resume(m)

        # 2) Working-set admission of never-run requests, arrival order.
        #    With no free capacity a newcomer enters only over a safe victim.
        n_running = len([m for m in view.members if m.running])
        room = working_set_size(
            view.gpu_mem_total + view.cpu_mem_total,
            self.cfg.per_request_mem_estimate,
            n_running,
            self.cfg,
        )
        admitted: list[int] = []
        admitted_views: list[WaitingView] = []
        in_service = len(view.members)
        for w in view.waiting:
            if in_service + len(admitted) >= room:
                break
            need = w.prompt_len + 1
            if slots > 0 and need <= mem:
                pass
            else:
                victims = [
                    r
                    for r in running
                    if r.request_id not in preempt_set
                    and r.request_id not in resumed
                    and self._safe_victim(r, view)
                ]
                if not victims:
                    break
                victim = max(victims, key=lambda r: (r.b_rem, -r.request_id))
                do_preempt(victim)
            slots -= 1
            mem -= need
            admitted.append(w.request_id)
            admitted_views.append(w)

        # 3) Memory headroom: rotate fat-buffer runners out before decode
        #    growth or queued restores hit the memory ceiling.  Their readers
        #    coast on the buffer while the space serves needier requests.
        contention = bool(view.waiting) or any(not m.running for m in members)
        active = [
            m
            for m in running
            if m.request_id not in preempt_set and m.request_id not in resumed
        ]
        growth = 0.0
        for m in active:
            if not m.last_iter_time:
                continue
            slice_est = self.cfg.schedule_interval / m.last_iter_time
            if contention:
                # Pacing caps growth at the ceiling plus one interval's reads.
                ceiling = m.rate * (
                    self.cfg.pacing_buffer_seconds + self.cfg.schedule_interval
                )
                slice_est = min(slice_est, max(0.0, ceiling - m.b_rem))
            growth += min(slice_est, m.output_len - m.generated)
        target = growth + view.h2d_blocked_tokens
        if target > mem:
            victims = sorted(
                (m for m in active if self._safe_victim(m, view)),
                key=lambda m: (-m.b_rem, m.request_id),
            )
            for victim in victims:
                if mem >= target:
                    break
                do_preempt(victim)
            if mem <= 0 and (view.h2d_blocked_tokens > 0 or growth > 0):
                # Memory is exhausted and nothing is safe to move.  Evict a
                # stalled runner anyway: queued restores land and the rest of
                # the batch regains room to decode.
                unsafe = sorted(
                    (m for m in active if m.request_id not in preempt_set),
                    key=lambda m: (-m.b_rem, -m.ctx_tokens, m.request_id),
                )
                floor = view.h2d_blocked_tokens + max(1, len(active) // 2)
                for victim in unsafe:
                    if mem >= floor:
                        break
                    do_preempt(victim)

        # 4) Utility-driven rebalance.  Only preempted members whose buffers
        #    drain within the resume horizon compete for slots (fatter ones
        #    coast); a swap displaces a safe runner and must improve drain
        #    time by at least one interval, which keeps rotation from
        #    flapping between the same pair of requests.
        horizon = self.cfg.critical_buffer_seconds + self.cfg.schedule_interval
        runners = [
            m
            for m in running
            if m.request_id not in preempt_set and m.request_id not in resumed
        ]
        needy = [
            m
            for m in preempted
            if m.request_id not in resumed and m.drain_s < horizon
        ]
        candidates = runners + needy
        if needy:
            pviews = [self._view_of(m, view) for m in candidates]
            lengths = {m.request_id: m.ctx_tokens for m in candidates}
            batch_budget = max(0, len(runners) + slots)
            mem_budget = max(0.0, mem + sum(m.ctx_tokens for m in runners))
            proposal = select_batch(pviews, mem_budget, batch_budget, lengths)
            incoming = sorted(
                (m for m in needy if m.request_id in proposal),
                key=lambda m: (m.drain_s, m.request_id),
            )
            outgoing = sorted(
                (
                    m
                    for m in runners
                    if m.request_id not in proposal and self._safe_victim(m, view)
                ),
                key=lambda m: (-m.b_rem, m.request_id),
            )
            fallback_victims = sorted(
                (
                    m
                    for m in runners
                    if m.request_id in proposal and self._safe_victim(m, view)
                ),
                key=lambda m: (-m.b_rem, m.request_id),
            )
            for m in incoming:
                if slots > 0 and m.ctx_tokens <= mem:
                    do_resume(m)
                    continue
                victim = None
                while outgoing:
                    cand = outgoing.pop(0)
                    if cand.drain_s > m.drain_s + self.cfg.schedule_interval:
                        victim = cand
                        break
                if victim is None:
                    while fallback_victims:
                        cand = fallback_victims.pop(0)
                        if cand.request_id in preempt_set:
                            continue
                        if cand.drain_s > m.drain_s + self.cfg.schedule_interval:
                            victim = cand
                            break
                if victim is None:
                    break
                do_preempt(victim)
                do_resume(m)

        # 5) Partition this tick's admissions into prefill sub-batches.
        if admitted:
            items = [
                PrefillItem(w.request_id, w.prompt_len + 1, w.waited_s)
                for w in admitted_views
            ]
            budget = max(mem, 0.0) + sum(w.prompt_len + 1 for w in admitted_views)
            decision.prefill_batches = partition_prefill(items, budget)

        decision.log = {
            "mode": mode,
            "admitted": admitted,
            "preempted": decision.preempt,
            "resumed": [rid for rid, _ in decision.resume],
            "recomputed": recomputed,
        }
        return decision

    def _fallback_tick(
        self, view: SystemSnapshot, members: list[MemberView]
    ) -> TickDecision:
        """Arrival-order service within device memory; no new admissions."""
        decision = TickDecision(mode=FCFS_FALLBACK)
        target: list[MemberView] = []
        used = 0.0
        pinned_slots = len([m for m in view.members if m.pinned])
        budget = view.max_batch - pinned_slots
        for m in sorted(members, key=lambda m: (m.arrival_time, m.request_id)):
            if len(target) >= budget:
                break
            if used + m.ctx_tokens <= view.gpu_mem_total:
                target.append(m)
                used += m.ctx_tokens
        target_ids = {m.request_id for m in target}
        recomputed = []
        for m in members:
            if m.running and m.request_id not in target_ids:
                decision.preempt.append(m.request_id)
                self.preemption_count += 1
        for m in target:
            if not m.running:
                how = _restore_mode(m, view)
                decision.resume.append((m.request_id, how))
                if how == "recompute":
                    recomputed.append(m.request_id)
        decision.log = {
            "mode": FCFS_FALLBACK,
            "admitted": [],
            "preempted": decision.preempt,
            "resumed": [rid for rid, _ in decision.resume],
            "recomputed": recomputed,
        }
        return decision

    def opportunistic(self, view: SystemSnapshot) -> OpportunisticDecision:
        decision = OpportunisticDecision()
        if self.mode == FCFS_FALLBACK:
            return decision
        slots = view.free_slots
        mem = view.gpu_mem_free
        preempted = sorted(
            (m for m in view.members if not m.running and not m.pinned),
            key=lambda m: (m.drain_s, m.request_id),
        )
        for m in preempted:
            if slots <= 0 or m.ctx_tokens > mem:
                break
            decision.resume.append((m.request_id, _restore_mode(m, view)))
            slots -= 1
            mem -= m.ctx_tokens
        n_running = len([m for m in view.members if m.running])
        room = working_set_size(
            view.gpu_mem_total + view.cpu_mem_total,
            self.cfg.per_request_mem_estimate,
            n_running,
            self.cfg,
        )
        in_service = len(view.members) + len(decision.resume)
        batch: list[int] = []
        for w in view.waiting:
            need = w.prompt_len + 1
            if slots <= 0 or need > mem or in_service >= room:
                break
            batch.append(w.request_id)
            slots -= 1
            mem -= need
            in_service += 1
        if batch:
            decision.prefill_batches = [batch]
        return decision

    def iteration_batch(
        self, running: list[tuple[int, int, float]], contention: bool
    ) -> list[int]:
        """Pace generation to consumption while other requests want the GPU.

        Uncontended, generation is work-conserving (run-ahead is free); under
        contention a request whose buffer already covers the pacing horizon
        sits out the iteration so capacity flows to needier requests.
        """
        if not contention or self.mode == FCFS_FALLBACK:
            return [rid for rid, _, _ in running]
        ceiling = self.cfg.pacing_buffer_seconds
        return [rid for rid, b, r in running if b <= r * ceiling]

    exhaustion_action = "pace"


class FcfsPolicy(Policy):
    """Conservative arrival-order scheduling with worst-case memory reserve."""

    name = "fcfs"

    def _reserved(self, view: SystemSnapshot) -> float:
        return sum(m.prompt_len + m.output_len for m in view.members)

    def _admissions(self, view: SystemSnapshot, slots: int) -> list[int]:
        reserved = self._reserved(view)
        batch: list[int] = []
        for w in view.waiting:
            need = w.prompt_len + w.output_len
            if slots <= 0 or reserved + need > view.gpu_mem_total:
                break
            batch.append(w.request_id)
            reserved += need
            slots -= 1
        return batch

    def on_tick(self, view: SystemSnapshot) -> TickDecision:
        opp = self.opportunistic(view)
        return TickDecision(
            mode=BUFFER_AWARE,
            resume=opp.resume,
            prefill_batches=opp.prefill_batches,
            log={
                "mode": BUFFER_AWARE,
                "admitted": [r for b in opp.prefill_batches for r in b],
                "preempted": [],
                "resumed": [rid for rid, _ in opp.resume],
                "recomputed": [rid for rid, how in opp.resume if how == "recompute"],
            },
        )

    def opportunistic(self, view: SystemSnapshot) -> OpportunisticDecision:
        decision = OpportunisticDecision()
        slots = view.free_slots
        # Evicted requests (memory-exhaustion victims) restart first, in
        # arrival order, via recompute.
        evicted = sorted(
            (m for m in view.members if not m.running and not m.pinned),
            key=lambda m: (m.arrival_time, m.request_id),
        )
        for m in evicted:
            if slots <= 0 or m.ctx_tokens > view.gpu_mem_free:
                break
            decision.resume.append((m.request_id, "recompute"))
            slots -= 1
        batch = self._admissions(view, slots)
        if batch:
            decision.prefill_batches = [batch]
        return decision


class ChunkedFcfsPolicy(FcfsPolicy):
    """FCFS with prefill split into fixed token chunks, interleaved with decode."""

    name = "chunked"
    interleave_prefill_chunks = True

    def prefill_chunk_tokens(self) -> int | None:
        return self.cfg.chunk_prefill_tokens


class QoePolicy(Policy):
    """Stall-avoidance priority scheduler with recompute-based preemption.

    Approximates a QoE-aware baseline: requests are ranked by how soon their
    reader runs dry (waiting requests by how close they are to the
    engagement deadline), with no buffer-coverage admission rule and no
    hierarchical KV manager, so every preemption discards state and every
    resume recomputes the full context.
    """

    name = "qoe"

    def __init__(self, cfg: SchedulerConfig | None = None):
        super().__init__(cfg)
        self.preemption_count = 0

    def _priority(self, drain_or_wait: float) -> float:
        return drain_or_wait

    def on_tick(self, view: SystemSnapshot) -> TickDecision:
        decision = TickDecision(mode=BUFFER_AWARE)
        members = [m for m in view.members if not m.pinned]
        scored: list[tuple[float, int, str, object]] = []
        for m in members:
            scored.append((m.drain_s, m.request_id, "member", m))
        for w in view.waiting:
            urgency = max(0.0, LATENCY_BYPASS_S - w.waited_s)
            scored.append((urgency, w.request_id, "waiting", w))
        scored.sort(key=lambda item: (item[0], item[1]))

        pinned_slots = len([m for m in view.members if m.pinned])
        pinned_mem = sum(m.ctx_tokens for m in view.members if m.pinned)
        budget = view.max_batch - pinned_slots
        mem_budget = view.gpu_mem_total - pinned_mem
        chosen_members: list[MemberView] = []
        admitted: list[WaitingView] = []
        used_members = 0.0
        used = 0.0
        for _, _, kind, obj in scored:
            need = obj.ctx_tokens if kind == "member" else obj.prompt_len + 1
            if len(chosen_members) + len(admitted) >= budget:
                break
            if used + need > mem_budget:
                continue
            used += need
            if kind == "member":
                chosen_members.append(obj)
                used_members += need
            else:
                admitted.append(obj)

        chosen_ids = {m.request_id for m in chosen_members}
        for m in members:
            if m.running and m.request_id not in chosen_ids:
                decision.preempt.append(m.request_id)
                self.preemption_count += 1
        recomputed = []
        for m in chosen_members:
            if not m.running:
                decision.resume.append((m.request_id, "recompute"))
                recomputed.append(m.request_id)
        if admitted:
            items = [
                PrefillItem(w.request_id, w.prompt_len + 1, w.waited_s)
                for w in admitted
            ]
            decision.prefill_batches = partition_prefill(items, mem_budget - used_members)
        decision.log = {
            "mode": BUFFER_AWARE,
            "admitted": [w.request_id for w in admitted],
            "preempted": decision.preempt,
            "resumed": [rid for rid, _ in decision.resume],
            "recomputed": recomputed,
        }
        return decision

    def opportunistic(self, view: SystemSnapshot) -> OpportunisticDecision:
        decision = OpportunisticDecision()
        slots = view.free_slots
        mem = view.gpu_mem_free
        evicted = sorted(
            (m for m in view.members if not m.running and not m.pinned),
            key=lambda m: (m.drain_s, m.request_id),
        )
        for m in evicted:
            if slots <= 0 or m.ctx_tokens > mem:
                break
            decision.resume.append((m.request_id, "recompute"))
            slots -= 1
            mem -= m.ctx_tokens
        batch: list[int] = []
        for w in view.waiting:
            need = w.prompt_len + 1
            if slots <= 0 or need > mem:
                break
            batch.append(w.request_id)
            slots -= 1
            mem -= need
        if batch:
            decision.prefill_batches = [batch]
        return decision


POLICIES = {
    "tokenflow": BufferAwarePolicy,
    "fcfs": FcfsPolicy,
    "chunked": ChunkedFcfsPolicy,
    "qoe": QoePolicy,
}


def make_policy(name: str, cfg: SchedulerConfig | None = None) -> Policy:
    try:
        cls = POLICIES[name]
    except KeyError:
        raise ValueError(
            f"unknown policy {name!r}; expected one of {sorted(POLICIES)}"
        ) from None
    return cls(cfg)
