"""Experiment runner: seeded single-pass runs, aggregation, and reports.

A run is a pure function of (config, seed): the run seed is split into a
stream sub-seed and a model sub-seed, the model sees each instance exactly
once (predict, then train), and the per-step log plus aggregates are written
as JSON lines.  A summary file collects across-run statistics; it contains
no timings or other machine-dependent values, so two executions of the same
config produce byte-identical summaries.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .models import AuxDropModel, ModelConfig, RDIFL, STRATEGIES, build_model, train_step
from .streams import StreamSpec, load_table, split_base_aux, stream_instances

_CI_Z = 1.96  # normal-approximation 95% interval


@dataclass
class RunRecord:
    """Everything one seeded pass produced."""

    seed: int
    n_steps: int
    error_flags: np.ndarray
    losses: np.ndarray
    clamp_count: int
    wall_time: float
    final_alphas: list | None = None

    @property
    def errors(self) -> int:
        return int(self.error_flags.sum())

    @property
    def average_loss(self) -> float:
        return float(self.losses.mean())

    def window_counts(self, window_size: int) -> list[int]:
        if window_size < 1:
            raise ConfigError(f"window_size must be >= 1, got {window_size}")
        return [int(self.error_flags[i:i + window_size].sum())
                for i in range(0, self.n_steps, window_size)]


@dataclass
class ExperimentConfig:
    name: str
    stream: StreamSpec
    model: dict = field(default_factory=dict)
    n_runs: int = 1
    base_seed: int = 0
    seeds: tuple | None = None
    outputs: str | None = None
    window_size: int | None = None
    thin: int = 1
    workers: int = 1
    declare_aux: bool = True
    expect: dict | None = None

    def run_seeds(self) -> list[int]:
        if self.seeds:
            return [int(s) for s in self.seeds]
        return [self.base_seed + i for i in range(self.n_runs)]


def _summary_stats(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=float)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    half = _CI_Z * std / np.sqrt(arr.size)
    return {"mean": mean, "std": std, "ci_low": mean - half, "ci_high": mean + half,
            "n": int(arr.size)}


def resolve_model_config(config: ExperimentConfig, n_features: int) -> ModelConfig:
    """Fill in the stream-derived fields (base width, auxiliary universe)."""
    base_cols, aux_cols = split_base_aux(n_features, config.stream.base_indices)
    fields = dict(config.model)
    declare = config.declare_aux or fields.get("strategy") == RDIFL
    fields.setdefault("n_base", len(base_cols))
    fields.setdefault("aux_ids", tuple(aux_cols) if declare else ())
    return ModelConfig(**fields)


def derive_seeds(run_seed: int) -> tuple[int, int]:
    """Split a run seed into independent (stream, model) sub-seeds."""
    state = np.random.SeedSequence(run_seed).generate_state(2, dtype=np.uint64)
    return int(state[0]), int(state[1])


def single_run(config: ExperimentConfig, run_seed: int,
               table: np.ndarray, labels: np.ndarray) -> RunRecord:
    """One fresh model, one pass over one fresh stream."""
    stream_seed, model_seed = derive_seeds(run_seed)
    spec = replace(config.stream, seed=stream_seed)
    model_cfg = resolve_model_config(config, table.shape[1])
    model = build_model(model_cfg, model_seed)
    flags = []
    losses = []
    start = time.perf_counter()
    consumed = 0
    for instance in stream_instances(table, labels, spec):
        result = train_step(model, instance)
        flags.append(result.error)
        losses.append(result.loss)
        consumed += 1
    wall = time.perf_counter() - start
    if model.step_count != consumed:
        raise RuntimeError(
            f"single-pass accounting broken: {model.step_count} updates for {consumed} instances")
    return RunRecord(seed=run_seed, n_steps=consumed,
                     error_flags=np.array(flags, dtype=np.uint8),
                     losses=np.array(losses, dtype=float),
                     clamp_count=model.clamp_count, wall_time=wall,
                     final_alphas=None if model.alphas is None
                     else [float(a) for a in model.alphas])


def _pool_run(args):
    return single_run(*args)


def windowed_errors(records: list[RunRecord], window_size: int) -> dict:
    """Across-run error counts per consecutive window with 95% CI bands.

    Also reports the across-window averages of the CI edges, and the per-run
    counts themselves (whose per-run sums equal the cumulative error counts).
    """
    per_run = [r.window_counts(window_size) for r in records]
    n_windows = max(len(c) for c in per_run)
    if any(len(c) != n_windows for c in per_run):
        raise ConfigError("runs have different lengths; cannot align windows")
    windows = []
    for w in range(n_windows):
        stats = _summary_stats([c[w] for c in per_run])
        windows.append(stats)
    return {
        "window_size": window_size,
        "per_run_counts": per_run,
        "windows": windows,
        "mean_ci_low": float(np.mean([w["ci_low"] for w in windows])),
        "mean_ci_high": float(np.mean([w["ci_high"] for w in windows])),
        "mean_errors": float(np.mean([w["mean"] for w in windows])),
    }


def _aggregate(config: ExperimentConfig, records: list[RunRecord]) -> dict:
    report = {
        "name": config.name,
        "seeds": [r.seed for r in records],
        "n_steps": records[0].n_steps,
        "errors": _summary_stats([r.errors for r in records]),
        "average_loss": _summary_stats([r.average_loss for r in records]),
        "clamp_counts": [r.clamp_count for r in records],
        "per_run": [{"seed": r.seed, "errors": r.errors, "average_loss": r.average_loss,
                     "clamp_count": r.clamp_count} for r in records],
        "table_row": None,
        "windows": None,
    }
    if config.window_size:
        report["windows"] = windowed_errors(records, config.window_size)
    err, loss = report["errors"], report["average_loss"]
    report["table_row"] = {
        "errors": f"{err['mean']:.1f}±{err['std']:.1f}",
        "average_loss": f"{loss['mean']:.4f}±{loss['std']:.4f}",
    }
    return report


class AggregateReport:
    """Aggregated results of one experiment across its seeds."""

    def __init__(self, config: ExperimentConfig, records: list[RunRecord]):
        self.config = config
        self.records = records
        self.summary = _aggregate(config, records)

    @property
    def errors_mean(self) -> float:
        return self.summary["errors"]["mean"]

    @property
    def loss_mean(self) -> float:
        return self.summary["average_loss"]["mean"]

    def summary_json(self) -> str:
        payload = dict(self.summary)
        payload["config"] = _config_payload(self.config)
        return json.dumps(payload, sort_keys=True, indent=1) + "\n"


def _config_payload(config: ExperimentConfig) -> dict:
    payload = asdict(config)
    payload["stream"]["windows"] = [
        [w.feature, w.start, w.end] for w in config.stream.windows]
    return payload


def _write_outputs(config: ExperimentConfig, report: AggregateReport) -> None:
    out = Path(config.outputs)
    out.mkdir(parents=True, exist_ok=True)
    thin = max(int(config.thin), 1)
    for rec in report.records:
        path = out / f"{config.name}_seed{rec.seed}.jsonl"
        with path.open("w", encoding="utf-8") as fh:
            for i in range(0, rec.n_steps, thin):
                fh.write(json.dumps({"step": i + 1, "loss": float(rec.losses[i]),
                                     "error": int(rec.error_flags[i])}) + "\n")
            alphas = None if rec.final_alphas is None else [float(a) for a in rec.final_alphas]
            aggregate = {"aggregate": {
                "seed": rec.seed, "errors": rec.errors, "average_loss": rec.average_loss,
                "clamp_count": rec.clamp_count, "wall_time": rec.wall_time,
                "final_alphas": alphas}}
            fh.write(json.dumps(aggregate) + "\n")
    (out / f"{config.name}_summary.json").write_text(report.summary_json(), encoding="utf-8")


def run_experiment(config: ExperimentConfig, table=None, labels=None) -> AggregateReport:
    """Run every seed of an experiment and aggregate; persists when `outputs` is set."""
    if table is None:
        table, labels = load_table(config.stream)
    seeds = config.run_seeds()
    if config.workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            records = list(pool.map(_pool_run, [(config, s, table, labels) for s in seeds]))
    else:
        records = [single_run(config, s, table, labels) for s in seeds]
    records.sort(key=lambda r: seeds.index(r.seed))
    report = AggregateReport(config, records)
    if config.outputs:
        _write_outputs(config, report)
    return report


def sweep_probability(config: ExperimentConfig, p_list, baseline: ExperimentConfig | None = None,
                      reference: ExperimentConfig | None = None) -> dict:
    """Run the experiment across availability probabilities.

    With a baseline config (a model that ignores the auxiliary features), each
    row carries delta_avg = baseline errors - model errors; with a reference
    config (full information) the improvement fraction delta_avg / delta_ai
    is added, where delta_ai = baseline errors - reference errors.
    """
    if config.stream.corruption != "bernoulli":
        raise ConfigError("sweep_probability needs corruption = 'bernoulli'")
    table, labels = load_table(config.stream)
    baseline_report = None
    delta_ai = None
    if baseline is not None:
        baseline_report = run_experiment(baseline)
    if reference is not None and baseline_report is not None:
        reference_report = run_experiment(reference)
        delta_ai = baseline_report.errors_mean - reference_report.errors_mean
    rows = []
    for p in p_list:
        sub = replace(config, name=f"{config.name}_p{p:g}",
                      stream=replace(config.stream, p=float(p)))
        report = run_experiment(sub, table, labels)
        row = {"p": float(p), "errors": report.summary["errors"],
               "average_loss": report.summary["average_loss"]}
        if baseline_report is not None:
            row["delta_avg"] = baseline_report.errors_mean - report.errors_mean
            if delta_ai:
                row["fraction_improvement"] = row["delta_avg"] / delta_ai
        rows.append(row)
    out = {"name": config.name, "rows": rows}
    if baseline_report is not None:
        out["baseline_errors"] = baseline_report.summary["errors"]
    if delta_ai is not None:
        out["delta_ai"] = delta_ai
    if config.outputs:
        path = Path(config.outputs)
        path.mkdir(parents=True, exist_ok=True)
        (path / f"{config.name}_sweep.json").write_text(
            json.dumps(out, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return out


def compare_baseline(config_a: ExperimentConfig, config_b: ExperimentConfig) -> dict:
    """Run two configs on identical streams and difference their error counts."""
    if replace(config_a.stream, seed=0) != replace(config_b.stream, seed=0):
        raise ConfigError("compare_baseline needs identical stream specs")
    if config_a.run_seeds() != config_b.run_seeds():
        raise ConfigError("compare_baseline needs identical seed lists")
    report_a = run_experiment(config_a)
    report_b = run_experiment(config_b)
    out = {
        "a": report_a.summary, "b": report_b.summary,
        "delta_avg": report_b.errors_mean - report_a.errors_mean,
    }
    window = config_a.window_size or config_b.window_size
    if window:
        wa = windowed_errors(report_a.records, window)
        wb = windowed_errors(report_b.records, window)
        diffs = []
        for w, (sa, sb) in enumerate(zip(wa["windows"], wb["windows"])):
            per_run = [b - a for a, b in
                       zip([c[w] for c in wa["per_run_counts"]],
                           [c[w] for c in wb["per_run_counts"]])]
            diffs.append(_summary_stats(per_run))
        out["window_deltas"] = diffs
    return out


def ablate(config: ExperimentConfig, dimension: str) -> dict:
    """Run the preset grid over dropout strategies or auxiliary-layer positions."""
    table, labels = load_table(config.stream)
    rows = []
    if dimension == "strategy":
        grid = ["RDANDO", "RDAL", "ADARDO", "AUXDROP", "RDIFL"]
        for strategy in grid:
            if strategy not in STRATEGIES:  # pragma: no cover - grid is static
                raise ConfigError(f"unknown strategy {strategy!r}")
            fields = dict(config.model)
            fields["strategy"] = strategy
            sub = replace(config, name=f"{config.name}_{strategy}", model=fields)
            report = run_experiment(sub, table, labels)
            rows.append({"strategy": strategy, "errors": report.summary["errors"],
                         "average_loss": report.summary["average_loss"],
                         "table_row": report.summary["table_row"]})
    elif dimension == "aux_position":
        depth = int(config.model.get("depth", ModelConfig.__dataclass_fields__["depth"].default))
        for position in range(1, depth):
            fields = dict(config.model)
            fields["position"] = position
            sub = replace(config, name=f"{config.name}_pos{position}", model=fields)
            report = run_experiment(sub, table, labels)
            rows.append({"position": position, "errors": report.summary["errors"],
                         "average_loss": report.summary["average_loss"],
                         "table_row": report.summary["table_row"]})
    else:
        raise ConfigError(f"unknown ablation dimension {dimension!r}; "
                          f"expected 'strategy' or 'aux_position'")
    out = {"name": config.name, "dimension": dimension, "rows": rows}
    if config.outputs:
        path = Path(config.outputs)
        path.mkdir(parents=True, exist_ok=True)
        (path / f"{config.name}_ablate_{dimension}.json").write_text(
            json.dumps(out, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return out


def check_expectation(report: AggregateReport) -> tuple[bool, str]:
    """Compare a report against its config's expected paper-table value."""
    expect = report.config.expect
    if not expect:
        return True, "no expectation configured"
    metric = expect.get("metric", "errors")
    mean = report.errors_mean if metric == "errors" else report.loss_mean
    target = float(expect["mean"])
    sigmas = float(expect.get("sigmas", 3.0))
    std = float(expect.get("std", 0.0))
    tolerance = sigmas * std
    ok = abs(mean - target) <= tolerance
    detail = (f"{metric}: got {mean:.4f}, expected {target:.4f} "
              f"± {tolerance:.4f} ({sigmas:g} sigma)")
    return ok, detail
