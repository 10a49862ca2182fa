"""Command-line interface for the experiment harness.

Exit codes: 0 success, 1 configuration error, 2 runtime failure (non-finite
loss or broken input data), 3 expectation failure when --assert is passed.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .config import load_config, preset_names
from .errors import ConfigError, DataFormatError, NonFiniteGradientError, RunAbortError
from .harness import (ExperimentConfig, ablate, check_expectation, compare_baseline,
                      run_experiment, sweep_probability)
from .models import build_model, finite_diff_check, train_step
from .harness import resolve_model_config, derive_seeds
from .streams import load_table, stream_instances


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seeds", help="comma-separated explicit run seeds")
    parser.add_argument("--runs", type=int, help="number of runs (overrides config)")
    parser.add_argument("--out", help="output directory (overrides config)")
    parser.add_argument("--limit", type=int, help="max stream instances (overrides config)")
    parser.add_argument("--workers", type=int, help="parallel run workers")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")


def _apply_common(config: ExperimentConfig, args) -> ExperimentConfig:
    if args.seeds:
        config = replace(config, seeds=tuple(int(s) for s in args.seeds.split(",")))
    if args.runs is not None:
        config = replace(config, n_runs=args.runs, seeds=None if not args.seeds else config.seeds)
    if args.out:
        config = replace(config, outputs=args.out)
    if args.limit is not None:
        config = replace(config, stream=replace(config.stream, limit=args.limit))
    if args.workers is not None:
        config = replace(config, workers=args.workers)
    return config


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


def _cmd_run(args) -> int:
    config = _apply_common(load_config(args.config), args)
    report = run_experiment(config)
    err = report.summary["errors"]
    loss = report.summary["average_loss"]
    _say(args, f"{config.name}: errors {err['mean']:.1f} ± {err['std']:.1f}, "
               f"average loss {loss['mean']:.4f} ± {loss['std']:.4f} "
               f"over {err['n']} run(s)")
    if config.outputs:
        _say(args, f"wrote {config.outputs}/{config.name}_summary.json")
    if args.assert_expectation:
        ok, detail = check_expectation(report)
        _say(args, ("PASS " if ok else "FAIL ") + detail)
        if not ok:
            return 3
    return 0


def _cmd_sweep(args) -> int:
    config = _apply_common(load_config(args.config), args)
    p_list = [float(p) for p in args.p.split(",")]
    baseline = _apply_common(load_config(args.baseline), args) if args.baseline else None
    reference = _apply_common(load_config(args.reference), args) if args.reference else None
    out = sweep_probability(config, p_list, baseline=baseline, reference=reference)
    for row in out["rows"]:
        line = f"p={row['p']:g}: errors {row['errors']['mean']:.1f}"
        if "delta_avg" in row:
            line += f", delta_avg {row['delta_avg']:.1f}"
        if "fraction_improvement" in row:
            line += f", fraction {row['fraction_improvement']:.3f}"
        _say(args, line)
    return 0


def _cmd_ablate(args) -> int:
    config = _apply_common(load_config(args.config), args)
    out = ablate(config, args.dimension)
    for row in out["rows"]:
        key = row.get("strategy", row.get("position"))
        _say(args, f"{key}: errors {row['errors']['mean']:.1f} "
                   f"± {row['errors']['std']:.1f}")
    return 0


def _cmd_compare(args) -> int:
    config_a = _apply_common(load_config(args.a), args)
    config_b = _apply_common(load_config(args.b), args)
    out = compare_baseline(config_a, config_b)
    _say(args, f"delta_avg (b - a): {out['delta_avg']:.1f}")
    if "window_deltas" in out:
        for i, w in enumerate(out["window_deltas"], start=1):
            _say(args, f"window {i}: mean delta {w['mean']:.1f} "
                       f"[{w['ci_low']:.1f}, {w['ci_high']:.1f}]")
    return 0


def _cmd_check_grad(args) -> int:
    config = _apply_common(load_config(args.config), args)
    table, labels = load_table(config.stream)
    stream_seed, model_seed = derive_seeds(config.run_seeds()[0])
    spec = replace(config.stream, seed=stream_seed)
    model = build_model(resolve_model_config(config, table.shape[1]), model_seed)
    worst = 0.0
    checked = 0
    status = 0
    for instance in stream_instances(table, labels, spec):
        if checked >= args.steps:
            break
        train_step(model, instance)
        report = finite_diff_check(model, instance, tolerance=args.tolerance)
        worst = max(worst, report.max_rel_err)
        checked += 1
        if not report.passed:
            status = 2
            _say(args, f"step {instance.t}: {report}")
    _say(args, f"checked {checked} step(s); max relative error {worst:.3e} "
               f"(tolerance {args.tolerance:g})")
    return status


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="auxstream",
        description="Single-pass online learning on streams with erratically "
                    "available features.",
        epilog=f"bundled presets: {', '.join(preset_names())}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("--config", required=True, help="config file path or preset name")
    p_run.add_argument("--assert", dest="assert_expectation", action="store_true",
                       help="exit 3 unless the configured expectation holds")
    _add_common(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="sweep the availability probability")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--p", required=True, help="comma-separated probabilities")
    p_sweep.add_argument("--baseline", help="config ignoring auxiliary features")
    p_sweep.add_argument("--reference", help="config with full information")
    _add_common(p_sweep)
    p_sweep.set_defaults(func=_cmd_sweep)

    p_ablate = sub.add_parser("ablate", help="run a preset ablation grid")
    p_ablate.add_argument("--config", required=True)
    p_ablate.add_argument("--dimension", required=True,
                          choices=["strategy", "aux_position"])
    _add_common(p_ablate)
    p_ablate.set_defaults(func=_cmd_ablate)

    p_cmp = sub.add_parser("compare", help="difference two configs on identical streams")
    p_cmp.add_argument("--a", required=True, help="model config")
    p_cmp.add_argument("--b", required=True, help="baseline config")
    _add_common(p_cmp)
    p_cmp.set_defaults(func=_cmd_compare)

    p_grad = sub.add_parser("check-grad", help="finite-difference gradient check")
    p_grad.add_argument("--config", required=True)
    p_grad.add_argument("--steps", type=int, default=5)
    p_grad.add_argument("--tolerance", type=float, default=1e-4)
    _add_common(p_grad)
    p_grad.set_defaults(func=_cmd_check_grad)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataFormatError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (RunAbortError, NonFiniteGradientError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
