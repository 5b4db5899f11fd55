"""Request trace generation and ingestion.

Produces the three workload flavors used throughout the experiments: bursty
arrivals (flash crowds, everything lands at t=0), Poisson arrivals (typical
traffic), and traces loaded from CSV files.  Prompt/output lengths are drawn
from truncated normal distributions (resampled until >= 1 token) and each
request carries the consumption rate of its reader, sampled from a small
discrete profile such as ``{15: 0.4, 20: 0.6}`` tokens/second.

All generation is deterministic for a fixed (config, seed) pair.  A single
seed feeds three independent sub-streams (arrivals, lengths, rates) so that
adding requests to one axis never perturbs samples on another.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

# Sub-stream offsets hashed into the seed so the arrival, length, and rate
# draws stay independent of each other.
_STREAM_ARRIVALS = 0
_STREAM_LENGTHS = 1
_STREAM_RATES = 2

TRACE_HEADER = ["id", "arrival_s", "prompt_tokens", "output_tokens", "rate_tps"]


class WorkloadError(ValueError):
    """Invalid workload configuration."""


class TraceParseError(ValueError):
    """Malformed trace file; carries the offending line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class TraceInvariantError(ValueError):
    """Trace violates a request invariant; names the offending field."""

    def __init__(self, message: str, fieldname: str):
        super().__init__(message)
        self.field = fieldname


@dataclass(frozen=True)
class RequestSpec:
    """One streaming request as it enters the system."""

    id: int
    arrival_time: float
    prompt_len: int
    output_len: int
    consume_rate: float

    def validate(self) -> None:
        if self.arrival_time < 0:
            raise TraceInvariantError(
                f"request {self.id}: arrival_time {self.arrival_time} < 0", "arrival_time"
            )
        if self.prompt_len < 1:
            raise TraceInvariantError(
                f"request {self.id}: prompt_len {self.prompt_len} < 1", "prompt_len"
            )
        if self.output_len < 1:
            raise TraceInvariantError(
                f"request {self.id}: output_len {self.output_len} < 1", "output_len"
            )
        if self.consume_rate <= 0:
            raise TraceInvariantError(
                f"request {self.id}: consume_rate {self.consume_rate} <= 0", "consume_rate"
            )


@dataclass(frozen=True)
class Trace:
    """Ordered request list, non-decreasing in arrival time."""

    requests: tuple[RequestSpec, ...]
    seed: int | None = None

    def __post_init__(self):
        ids = [r.id for r in self.requests]
        if sorted(ids) != list(range(len(ids))):
            raise TraceInvariantError("request ids must be unique and dense (0..n-1)", "id")
        for r in self.requests:
            r.validate()
        for a, b in zip(self.requests, self.requests[1:]):
            if b.arrival_time < a.arrival_time:
                raise TraceInvariantError(
                    f"arrival_time not sorted at request {b.id}", "arrival_time"
                )

    def __len__(self) -> int:
        return len(self.requests)


@dataclass(frozen=True)
class WorkloadConfig:
    """Parameters for synthetic trace generation.

    ``kind`` selects the arrival process; exactly the fields relevant to that
    kind are required.  Length distributions are (mean, stddev) pairs of a
    normal truncated at one token.
    """

    kind: str  # burst | poisson | file
    burst_size: int | None = None
    poisson_rate: float | None = None  # arrivals/second
    duration: float | None = None  # seconds
    prompt_len_dist: tuple[float, float] = (512.0, 128.0)
    output_len_dist: tuple[float, float] = (1024.0, 256.0)
    rate_profile: dict[float, float] = field(default_factory=lambda: {20.0: 1.0})
    path: str | None = None  # file kind only

    def validate(self) -> None:
        if self.kind not in ("burst", "poisson", "file"):
            raise WorkloadError(f"unknown workload kind {self.kind!r}")
        if self.kind == "burst":
            if self.burst_size is None or self.burst_size < 1:
                raise WorkloadError("burst workload requires burst_size >= 1")
        elif self.kind == "poisson":
            if self.poisson_rate is None or self.poisson_rate <= 0:
                raise WorkloadError("poisson workload requires poisson_rate > 0")
            if self.duration is None or self.duration <= 0:
                raise WorkloadError("poisson workload requires duration > 0")
        elif self.kind == "file":
            if not self.path:
                raise WorkloadError("file workload requires path")
            return
        for name, (mean, std) in (
            ("prompt_len_dist", self.prompt_len_dist),
            ("output_len_dist", self.output_len_dist),
        ):
            if mean < 1:
                raise WorkloadError(f"{name} mean must be >= 1, got {mean}")
            if std < 0:
                raise WorkloadError(f"{name} stddev must be >= 0, got {std}")
        validate_rate_profile(self.rate_profile)


def validate_rate_profile(profile: dict[float, float]) -> None:
    if not profile:
        raise WorkloadError("rate_profile must not be empty")
    for rate, weight in profile.items():
        if rate <= 0:
            raise WorkloadError(f"rate_profile rate {rate} must be > 0")
        if weight < 0:
            raise WorkloadError(f"rate_profile weight {weight} must be >= 0")
    total = sum(profile.values())
    if abs(total - 1.0) > 1e-9:
        raise WorkloadError(f"rate_profile weights sum to {total}, expected 1.0")


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([stream, seed])


def _sample_length(rng: np.random.Generator, mean: float, std: float) -> int:
    """Truncated-normal sample: redraw until the rounded value is >= 1."""
    if std == 0:
        return max(1, int(round(mean)))
    while True:
        value = int(round(rng.normal(mean, std)))
        if value >= 1:
            return value


def sample_consumption_rate(
    rate_profile: dict[float, float], rng: np.random.Generator
) -> float:
    """Draw one consumption rate from a discrete profile.

    The profile maps tokens/second to probability; weights must sum to 1
    within 1e-9.  Sampling is deterministic per RNG stream state.
    """
    validate_rate_profile(rate_profile)
    rates = sorted(rate_profile)
    weights = [rate_profile[r] for r in rates]
    return float(rng.choice(rates, p=np.asarray(weights) / sum(weights)))


def _sample_request_bodies(
    cfg: WorkloadConfig, seed: int, n: int
) -> list[tuple[int, int, float]]:
    len_rng = _rng(seed, _STREAM_LENGTHS)
    rate_rng = _rng(seed, _STREAM_RATES)
    bodies = []
    for _ in range(n):
        prompt = _sample_length(len_rng, *cfg.prompt_len_dist)
        output = _sample_length(len_rng, *cfg.output_len_dist)
        rate = sample_consumption_rate(cfg.rate_profile, rate_rng)
        bodies.append((prompt, output, rate))
    return bodies


def generate_burst(cfg: WorkloadConfig, seed: int) -> Trace:
    """Flash-crowd trace: ``burst_size`` requests all arriving at t=0."""
    cfg.validate()
    if cfg.kind != "burst":
        raise WorkloadError(f"generate_burst needs kind='burst', got {cfg.kind!r}")
    bodies = _sample_request_bodies(cfg, seed, cfg.burst_size)
    requests = tuple(
        RequestSpec(i, 0.0, prompt, output, rate)
        for i, (prompt, output, rate) in enumerate(bodies)
    )
    return Trace(requests=requests, seed=seed)


def generate_poisson(cfg: WorkloadConfig, seed: int) -> Trace:
    """Poisson-arrival trace: exponential inter-arrival gaps, mean 1/rate.

    Requests whose arrival falls beyond ``duration`` are truncated.
    """
    cfg.validate()
    if cfg.kind != "poisson":
        raise WorkloadError(f"generate_poisson needs kind='poisson', got {cfg.kind!r}")
    arrival_rng = _rng(seed, _STREAM_ARRIVALS)
    arrivals: list[float] = []
    t = 0.0
    while True:
        t += float(arrival_rng.exponential(1.0 / cfg.poisson_rate))
        if t > cfg.duration:
            break
        arrivals.append(t)
    bodies = _sample_request_bodies(cfg, seed, len(arrivals))
    requests = tuple(
        RequestSpec(i, arrivals[i], prompt, output, rate)
        for i, (prompt, output, rate) in enumerate(bodies)
    )
    return Trace(requests=requests, seed=seed)


def generate(cfg: WorkloadConfig, seed: int) -> Trace:
    """Dispatch on ``cfg.kind``; file configs load from ``cfg.path``."""
    if cfg.kind == "burst":
        return generate_burst(cfg, seed)
    if cfg.kind == "poisson":
        return generate_poisson(cfg, seed)
    if cfg.kind == "file":
        cfg.validate()
        return load_trace(cfg.path)
    raise WorkloadError(f"unknown workload kind {cfg.kind!r}")


def load_trace(path: str) -> Trace:
    """Parse a CSV trace file (see TRACE_HEADER for the schema).

    Rows are normalized to arrival order.  Raises TraceParseError with the
    line number on malformed input and TraceInvariantError when a field
    violates a request invariant.
    """
    rows: list[RequestSpec] = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        for lineno, row in enumerate(reader, start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if lineno == 1 and [c.strip() for c in row] == TRACE_HEADER:
                continue
            if len(row) != 5:
                raise TraceParseError(f"expected 5 fields, got {len(row)}", lineno)
            try:
                spec = RequestSpec(
                    id=int(row[0]),
                    arrival_time=float(row[1]),
                    prompt_len=int(row[2]),
                    output_len=int(row[3]),
                    consume_rate=float(row[4]),
                )
            except ValueError as exc:
                raise TraceParseError(str(exc), lineno) from exc
            spec.validate()
            rows.append(spec)
    rows.sort(key=lambda r: (r.arrival_time, r.id))
    return Trace(requests=tuple(rows), seed=None)


def write_trace(trace: Trace, path: str) -> None:
    """Write a trace back out in the canonical CSV schema."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TRACE_HEADER)
        for r in trace.requests:
            writer.writerow([r.id, r.arrival_time, r.prompt_len, r.output_len, r.consume_rate])
