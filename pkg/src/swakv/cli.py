"""``swakv`` command line: run, plan, sweep, analyze, bench.

Exit codes: 0 success, 2 configuration error, 3 infeasible plan,
4 simulated out-of-device-memory.
"""

from __future__ import annotations

import csv
import io
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from swakv.analysis import analyze
from swakv.attention import SparsityConfig
from swakv.bench import run_bench
from swakv.config import ConfigError, RunConfig
from swakv.engine import ContextOverflow, run_inference
from swakv.mathops import ContractViolation
from swakv.memsim import OutOfDeviceMemory
from swakv.scheduler import InfeasiblePlan, make_plan, predict_breakdown

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_OOM = 4

SWEEP_CSV_SCHEMA = "swakv.sweep/v1"
SWEEP_AXES = {
    "batch": ("workload", "batch", int, "1,2,4,8,16"),
    "ratio": ("sparsity", "ratio", float, "0.2,0.4,0.6,0.8,1.0"),
    "bandwidth": ("scheduling", "bandwidth", float, "1e9,4e9,16e9,64e9"),
    "capacity": ("scheduling", "device_capacity", float, "2048,4096,8192,16384"),
}
SWEEP_COLUMNS = [
    "axis", "value", "policy", "status", "error", "throughput_tokens_per_s", "seconds_per_token",
    "total_s", "prefill_s", "compute_s", "transfer_s", "recompute_s", "peak_device_bytes",
    "transferred_bytes", "alpha", "beta", "p1", "p2",
]


def _clean(obj):
    """Make a structure strict-JSON safe: non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def _fail(code: int, exc: BaseException):
    click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
    sys.exit(code)


def _load_config(path, seed) -> RunConfig:
    try:
        cfg = RunConfig.from_file(path) if path else RunConfig()
        if seed is not None:
            cfg = cfg.with_seed(seed)
        cfg.cost_params()
        return cfg
    except (ConfigError, ContractViolation) as exc:
        _fail(EXIT_CONFIG, exc)


def _simulate(cfg: RunConfig):
    """Run inference, mapping failures onto exit codes."""
    try:
        return run_inference(cfg)
    except InfeasiblePlan as exc:
        _fail(EXIT_INFEASIBLE, exc)
    except OutOfDeviceMemory as exc:
        _fail(EXIT_OOM, exc)
    except (ContractViolation, ContextOverflow) as exc:
        _fail(EXIT_CONFIG, exc)


def _csv_float(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                             help="JSON run configuration (defaults apply when omitted).")
out_option = click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
                          help="Directory for reports; JSON goes to stdout when omitted.")
seed_option = click.option("--seed", type=click.IntRange(min=0), default=None,
                           help="Override the model and workload seeds.")


@click.group()
def main():
    """Token-level KV cache inference simulator."""


@main.command()
@config_option
@out_option
@seed_option
def run(config_path, out_dir, seed):
    """Run one inference and emit its report and per-step CSV."""
    cfg = _load_config(config_path, seed)
    metrics = _simulate(cfg)
    report = dumps(metrics.report())
    if out_dir is None:
        click.echo(report, nl=False)
        return
    out = Path(out_dir)
    _write(out / cfg.outputs.report, report)
    _write(out / cfg.outputs.steps, metrics.steps_csv())
    _write(out / "wall_clock.json", dumps(metrics.wall_clock))
    click.echo(f"wrote {out / cfg.outputs.report}", err=True)


@main.command()
@config_option
@out_option
@seed_option
def plan(config_path, out_dir, seed):
    """Solve the schedule plan and print it with its predicted breakdown."""
    cfg = _load_config(config_path, seed)
    params = cfg.cost_params()
    try:
        sp = make_plan(cfg.policy, params)
    except InfeasiblePlan as exc:
        _fail(EXIT_INFEASIBLE, exc)
    payload = dumps({"plan": sp.to_dict(), "breakdown": predict_breakdown(sp, params)})
    if out_dir is None:
        click.echo(payload, nl=False)
    else:
        _write(Path(out_dir) / "plan.json", payload)


def _sweep_point(task) -> dict:
    """Worker: one (config, axis value, policy) point; failures become rows."""
    cfg_dict, axis, value, policy = task
    row = {c: "" for c in SWEEP_COLUMNS}
    row.update(axis=axis, value=value, policy=policy)
    section, key, _, _ = SWEEP_AXES[axis]
    try:
        cfg_dict = json.loads(json.dumps(cfg_dict))
        cfg_dict[section][key] = value
        cfg_dict["scheduling"]["policy"] = policy
        cfg = RunConfig.from_dict(cfg_dict)
        m = run_inference(cfg)
    except (ConfigError, ContractViolation, ContextOverflow, InfeasiblePlan, OutOfDeviceMemory) as exc:
        row.update(status="failed", error=type(exc).__name__)
        return row
    t = m.totals
    row.update(
        status="ok",
        throughput_tokens_per_s=m.throughput_tokens_per_s,
        seconds_per_token=m.seconds_per_token,
        total_s=t["total_seconds"],
        prefill_s=t["prefill_seconds"],
        compute_s=t["compute_seconds"],
        transfer_s=t["transfer_seconds"],
        recompute_s=t["recompute_seconds"],
        peak_device_bytes=m.peak_device_bytes,
        transferred_bytes=m.transferred_bytes,
        alpha=m.plan["alpha"],
        beta=m.plan["beta"],
        p1=m.plan["p1"],
        p2=m.plan["p2"],
    )
    return row


def sweep_rows(cfg: RunConfig, axis: str, values, policies, jobs: int = 1) -> list[dict]:
    base = cfg.to_dict()
    tasks = [(base, axis, v, pol) for v in values for pol in policies]
    if jobs <= 1:
        return [_sweep_point(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_sweep_point, tasks))


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([SWEEP_CSV_SCHEMA] + SWEEP_COLUMNS)
    for i, row in enumerate(rows):
        w.writerow([i] + [_csv_float(row[c]) for c in SWEEP_COLUMNS])
    return buf.getvalue()


def _parse_values(text: str, kind) -> list:
    try:
        return [kind(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise click.BadParameter(str(exc)) from exc


@main.command()
@config_option
@out_option
@seed_option
@click.option("--axis", type=click.Choice(sorted(SWEEP_AXES)), required=True)
@click.option("--values", default=None, help="Comma-separated axis values.")
@click.option("--policies", default="dynamic", show_default=True,
              help="Comma-separated scheduling policies to run at every point.")
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True)
def sweep(config_path, out_dir, seed, axis, values, policies, jobs):
    """Run the configuration across one axis and write one CSV row per point."""
    cfg = _load_config(config_path, seed)
    _, _, kind, default = SWEEP_AXES[axis]
    vals = _parse_values(values or default, kind)
    pols = [p.strip() for p in policies.split(",") if p.strip()]
    rows = sweep_rows(cfg, axis, vals, pols, jobs)
    text = sweep_csv(rows)
    if out_dir is None:
        click.echo(text, nl=False)
    else:
        _write(Path(out_dir) / "sweep.csv", text)


@main.command("analyze")
@config_option
@out_option
@seed_option
@click.option("--ratios", default=None, help="Comma-separated caching ratios (config ratio by default).")
@click.option("--seeds", type=click.IntRange(min=1), default=1, show_default=True,
              help="Number of consecutive seeds starting at the configured one.")
def analyze_cmd(config_path, out_dir, seed, ratios, seeds):
    """Paired dense/SWA/local/strided sparsity and correlation report."""
    cfg = _load_config(config_path, seed)
    rs = _parse_values(ratios, float) if ratios else [cfg.sparsity.ratio]
    try:
        variants = [SparsityConfig("dense")] + [
            SparsityConfig(v, r) for r in rs for v in ("swa", "local", "strided")
        ]
    except ContractViolation as exc:
        _fail(EXIT_CONFIG, exc)
    runs = []
    for i in range(seeds):
        run_cfg = cfg.with_seed(cfg.model.seed + i)
        runs.append({"seed": run_cfg.model.seed,
                     **analyze(run_cfg.build_model(), run_cfg.prompt_tokens(), run_cfg.n, variants)})
    summary = {}
    for j, v in enumerate(variants):
        label = runs[0]["variants"][j]["label"]
        rhos = [r["variants"][j]["mean_rho"] for r in runs]
        summary[label] = {"mean_rho": float(np.nanmean(rhos)) if not all(map(math.isnan, rhos)) else math.nan,
                          "mean_sparsity": float(np.mean([r["variants"][j]["mean_sparsity"] for r in runs]))}
    payload = dumps({"config": cfg.to_dict(), "summary": summary, "runs": runs})
    if out_dir is None:
        click.echo(payload, nl=False)
    else:
        _write(Path(out_dir) / "analysis.json", payload)


@main.command()
@config_option
@out_option
@click.option("--repeats", type=click.IntRange(min=1), default=3, show_default=True)
def bench(config_path, out_dir, repeats):
    """Time real decode steps at several shapes and fit mac_rate."""
    from swakv.bench import DEFAULT_POINTS, BenchPoint, time_decode_step

    cfg = _load_config(config_path, None)
    result = run_bench(
        [BenchPoint(*p) for p in DEFAULT_POINTS],
        measure=lambda p: time_decode_step(p, repeats),
        default=cfg.scheduling.mac_rate,
    )
    if result.warning:
        click.echo(f"warning: {result.warning}", err=True)
    payload = dumps({"wall_clock": result.to_dict()})
    if out_dir is None:
        click.echo(payload, nl=False)
    else:
        _write(Path(out_dir) / "bench.json", payload)


if __name__ == "__main__":
    main()
