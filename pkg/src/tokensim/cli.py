"""Experiment orchestration and command-line entry point.

Reads a JSON experiment config, runs the policy x seed x ablation matrix,
and writes one report JSON plus a per-request CSV per cell, an optional
event-log JSONL, and a summary table with deltas against the FCFS baseline.
Reports contain no timestamps, so re-running an experiment with the same
config reproduces byte-identical files.

Shipped presets (``--golden <name>``): ``figure7`` replays the three-request
preemption walkthrough as a golden event log; ``table2`` runs the four
memory-management ablation variants; ``burst-4090b`` and ``poisson-h200c``
are desk-scale analogs of the controlled-distribution setups.
"""

from __future__ import annotations

import argparse
import csv
import importlib.resources
import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .costs import CostModel
from .engine import CapacityError, DeadlockError, SimConfig, SimResult, run
from .metrics import (
    EffectiveThroughputConfig,
    QosConfig,
    effective_throughput,
    effective_token_weight,
    qos,
    raw_throughput,
    ttft_stats,
)
from .scheduler import POLICIES, SchedulerConfig, make_policy
from .workload import Trace, WorkloadConfig, generate, load_trace

PRESETS = ("figure7", "table2", "burst-4090b", "poisson-h200c")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SIM = 2


class ConfigError(ValueError):
    """Invalid experiment config; message names the offending path."""


@dataclass(frozen=True)
class AblationSpec:
    name: str = "full"
    write_through: bool = True
    overlap: bool = True
    offload: bool = True

    @property
    def is_full(self) -> bool:
        return self.write_through and self.overlap and self.offload


@dataclass
class ExperimentConfig:
    workload: WorkloadConfig
    sim: SimConfig
    scheduler: SchedulerConfig
    policies: list[str]
    qos: QosConfig
    eff: EffectiveThroughputConfig
    seeds: list[int]
    ablations: list[AblationSpec] = field(default_factory=lambda: [AblationSpec()])
    output_dir: str = "out"
    emit_events: bool = False


def _reject_unknown(data: dict, allowed: set[str], path: str) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")


def _build(cls, data: dict, path: str):
    allowed = {f.name for f in fields(cls)}
    _reject_unknown(data, allowed, path)
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_workload(data: dict, base: Path) -> WorkloadConfig:
    data = dict(data)
    if "rate_profile" in data:
        data["rate_profile"] = {float(k): float(v) for k, v in data["rate_profile"].items()}
    for key in ("prompt_len_dist", "output_len_dist"):
        if key in data:
            data[key] = tuple(data[key])
    if data.get("path"):
        data["path"] = str(_resolve_path(data["path"], base))
    cfg = _build(WorkloadConfig, data, "workload")
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"workload: {exc}") from exc
    return cfg


def _resolve_path(path: str, base: Path) -> Path:
    if path.startswith("@preset/"):
        ref = importlib.resources.files("tokensim.presets") / path[len("@preset/"):]
        return Path(str(ref))
    p = Path(path)
    return p if p.is_absolute() else base / p


def _parse_sim(data: dict) -> SimConfig:
    data = dict(data)
    cm_data = data.pop("cost_model", {})
    cm = _build(CostModel, cm_data, "sim.cost_model")
    allowed = {f.name for f in fields(SimConfig)} - {"cost_model"}
    _reject_unknown(data, allowed, "sim")
    try:
        sim = SimConfig(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sim: {exc}") from exc
    return sim, cm


def _parse_ablations(data, path: str) -> list[AblationSpec]:
    if isinstance(data, dict):
        data = [data]
    specs = []
    for i, entry in enumerate(data):
        spec = _build(AblationSpec, entry, f"{path}[{i}]")
        specs.append(spec)
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError(f"{path}: duplicate ablation names")
    return specs


def parse_config(path: str | Path) -> tuple[ExperimentConfig, CostModel]:
    """Load and validate an experiment config; unknown keys are rejected."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    allowed = {
        "workload",
        "sim",
        "scheduler",
        "policies",
        "qos",
        "eff",
        "seeds",
        "ablations",
        "output_dir",
        "emit_events",
    }
    _reject_unknown(data, allowed, "config")
    if "workload" not in data or "sim" not in data:
        raise ConfigError("config: workload and sim sections are required")

    workload = _parse_workload(data["workload"], path.parent)
    sim, cm = _parse_sim(data["sim"])
    scheduler = _build(SchedulerConfig, data.get("scheduler", {}), "scheduler")
    qos_cfg = _build(QosConfig, data.get("qos", {}), "qos")
    eff_cfg = _build(EffectiveThroughputConfig, data.get("eff", {}), "eff")
    policies = data.get("policies", ["tokenflow"])
    if not policies:
        raise ConfigError("policies: need at least one policy")
    for name in policies:
        if name not in POLICIES:
            raise ConfigError(f"policies: unknown policy {name!r}")
    seeds = data.get("seeds", [0])
    if not seeds:
        raise ConfigError("seeds: need at least one seed")
    ablations = _parse_ablations(data.get("ablations", [{}]), "ablations")
    if any(not a.is_full for a in ablations) and set(policies) != {"tokenflow"}:
        raise ConfigError(
            "ablations: memory-management ablations only apply to the tokenflow policy"
        )
    cfg = ExperimentConfig(
        workload=workload,
        sim=sim,
        scheduler=scheduler,
        policies=list(policies),
        qos=qos_cfg,
        eff=eff_cfg,
        seeds=[int(s) for s in seeds],
        ablations=ablations,
        output_dir=str(data.get("output_dir", "out")),
        emit_events=bool(data.get("emit_events", False)),
    )
    return cfg, cm


@dataclass
class CellResult:
    policy: str
    ablation: str
    seed: int
    report: dict
    result: SimResult | None
    error: str | None = None

    @property
    def cell_id(self) -> str:
        tag = f"_{self.ablation}" if self.ablation != "full" else ""
        return f"{self.policy}{tag}_s{self.seed}"


def _cell_report(result: SimResult, cfg: ExperimentConfig) -> dict:
    stats = ttft_stats(result.records)
    return {
        "policy": result.policy,
        "seed": None,  # filled by caller
        "qos": round(qos(result.records, result.total_time, cfg.qos), 9),
        "effective_tps": round(
            effective_throughput(result.records, result.total_time, cfg.eff), 9
        ),
        "raw_tps": round(raw_throughput(result.records, result.total_time), 9),
        "ttft_mean": round(stats["mean"], 9),
        "ttft_p50": round(stats["p50"], 9),
        "ttft_p99": round(stats["p99"], 9),
        "total_rebuffer_s": round(sum(r.rebuffer_s for r in result.records), 9),
        "completion_time_s": round(result.total_time, 9),
        "preemptions": result.total_preemptions,
        "recomputes": result.total_recomputes,
    }


def run_cell(
    trace: Trace,
    policy_name: str,
    ablation: AblationSpec,
    seed: int,
    cfg: ExperimentConfig,
    cm: CostModel,
) -> CellResult:
    sim = replace(
        cfg.sim,
        write_through=ablation.write_through,
        overlap=ablation.overlap,
        offload=ablation.offload,
        seed=seed,
    )
    policy = make_policy(policy_name, cfg.scheduler)
    try:
        result = run(trace, policy, cm, sim)
    except (DeadlockError, CapacityError) as exc:
        return CellResult(
            policy=policy_name,
            ablation=ablation.name,
            seed=seed,
            report={},
            result=None,
            error=f"{type(exc).__name__}: {exc}",
        )
    report = _cell_report(result, cfg)
    report["seed"] = seed
    report["ablation"] = ablation.name
    return CellResult(
        policy=policy_name, ablation=ablation.name, seed=seed, report=report, result=result
    )


def _trace_for_seed(cfg: ExperimentConfig, seed: int) -> Trace:
    if cfg.workload.kind == "file":
        return load_trace(cfg.workload.path)
    return generate(cfg.workload, seed)


def _write_request_csv(path: Path, result: SimResult, cfg: ExperimentConfig) -> None:
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["request_id", "token_index", "gen_time_s", "consume_time_s", "weight"])
        for rec in result.records:
            for j, (g, c, b) in enumerate(
                zip(rec.gen_times, rec.consume_times, rec.buffer_at_gen)
            ):
                w = effective_token_weight(b, rec.output_len, cfg.eff)
                writer.writerow([rec.request_id, j, f"{g:.9f}", f"{c:.9f}", f"{w:.6f}"])


def emit_summary(cells: list[CellResult], out_dir: Path) -> list[dict]:
    """Write summary.csv and a readable summary.txt; returns the rows.

    When FCFS cells are present, tokenflow rows gain delta columns against
    the FCFS baseline with the same seed.
    """
    fcfs_by_seed = {
        c.seed: c.report for c in cells if c.policy == "fcfs" and not c.error
    }
    rows = []
    for cell in cells:
        row = {"cell": cell.cell_id, "policy": cell.policy, "ablation": cell.ablation, "seed": cell.seed}
        if cell.error:
            row["error"] = cell.error
            rows.append(row)
            continue
        row.update({k: v for k, v in cell.report.items() if k not in ("policy", "seed", "ablation")})
        base = fcfs_by_seed.get(cell.seed)
        if base and cell.policy != "fcfs":
            if base["ttft_p99"] > 0:
                row["ttft_p99_reduction_pct"] = round(
                    100.0 * (1.0 - cell.report["ttft_p99"] / base["ttft_p99"]), 6
                )
            if base["effective_tps"] > 0:
                row["eff_tps_gain_pct"] = round(
                    100.0 * (cell.report["effective_tps"] / base["effective_tps"] - 1.0), 6
                )
        rows.append(row)

    header: list[str] = []
    for row in rows:
        for key in row:
            if key not in header:
                header.append(key)
    with (out_dir / "summary.csv").open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=header, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)

    lines = []
    for row in rows:
        if "error" in row:
            lines.append(f"{row['cell']}: FAILED {row['error']}")
            continue
        parts = [f"{row['cell']:<28}"]
        for key in ("qos", "effective_tps", "raw_tps", "ttft_p99", "total_rebuffer_s", "completion_time_s"):
            if key in row:
                parts.append(f"{key}={row[key]:.3f}")
        for key in ("ttft_p99_reduction_pct", "eff_tps_gain_pct"):
            if key in row:
                parts.append(f"{key}={row[key]:+.1f}")
        lines.append("  ".join(parts))
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n")
    return rows


def run_experiment(cfg: ExperimentConfig, cm: CostModel) -> int:
    """Run every (policy, seed, ablation) cell and write all reports."""
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells: list[CellResult] = []
    failed = False
    for seed in cfg.seeds:
        trace = _trace_for_seed(cfg, seed)
        for policy_name in cfg.policies:
            for ablation in cfg.ablations:
                if ablation.name != "full" and policy_name != "tokenflow":
                    continue
                cell = run_cell(trace, policy_name, ablation, seed, cfg, cm)
                cells.append(cell)
                if cell.error:
                    failed = True
                    print(f"{cell.cell_id}: FAILED {cell.error}", file=sys.stderr)
                    continue
                report_path = out_dir / f"report_{cell.cell_id}.json"
                report_path.write_text(json.dumps(cell.report, sort_keys=True, indent=2) + "\n")
                _write_request_csv(out_dir / f"requests_{cell.cell_id}.csv", cell.result, cfg)
                if cfg.emit_events:
                    (out_dir / f"events_{cell.cell_id}.jsonl").write_text(
                        cell.result.events_jsonl()
                    )
    emit_summary(cells, out_dir)
    return EXIT_SIM if failed else EXIT_OK


def preset_path(name: str) -> Path:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")
    ref = importlib.resources.files("tokensim.presets") / f"{name}.json"
    return Path(str(ref))


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokensim",
        description="Discrete-event simulator for buffer-aware LLM text streaming",
    )
    parser.add_argument("--config", type=str, help="experiment config JSON")
    parser.add_argument("--golden", type=str, choices=PRESETS, help="run a shipped preset")
    parser.add_argument("--policy", type=str, action="append", help="override policy list")
    parser.add_argument("--seed", type=int, action="append", help="override seed list")
    parser.add_argument("--trace", type=str, help="override workload with a trace CSV")
    parser.add_argument("--workload", type=str, help="workload config JSON (overrides)")
    parser.add_argument("--emit-events", action="store_true", help="write event-log JSONL per cell")
    parser.add_argument("--out", type=str, help="output directory override")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        if args.golden:
            cfg, cm = parse_config(preset_path(args.golden))
            cfg.emit_events = True
        elif args.config:
            cfg, cm = parse_config(args.config)
        else:
            print("error: provide --config or --golden", file=sys.stderr)
            return EXIT_CONFIG
        if args.workload:
            wl_data = json.loads(Path(args.workload).read_text())
            cfg.workload = _parse_workload(wl_data, Path(args.workload).parent)
        if args.trace:
            cfg.workload = WorkloadConfig(kind="file", path=args.trace)
            cfg.workload.validate()
        if args.policy:
            for name in args.policy:
                if name not in POLICIES:
                    raise ConfigError(f"--policy: unknown policy {name!r}")
            cfg.policies = args.policy
        if args.seed:
            cfg.seeds = args.seed
        if args.out:
            cfg.output_dir = args.out
        if args.emit_events:
            cfg.emit_events = True
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run_experiment(cfg, cm)


if __name__ == "__main__":
    sys.exit(main())
