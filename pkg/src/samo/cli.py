"""Experiment runner: execute single runs and sweeps, reproduce the
two-objective trajectory figure, and probe Hessian spectra of saved
parameter snapshots. Emits plot-ready CSV/JSON only; no built-in plotting.

Exit codes: 0 ok, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .config import ExperimentConfig, apply_overrides, load_config, parse_config
from .core import ConfigError, LayeredParams, NumericError, restrict
from .diagnostics import (
    MetricSpec,
    cosine_matrix,
    delta_m,
    hessian_spectrum,
    save_cosine_csv,
    save_spectrum_json,
)
from .optimizer import OptimizationAbort, OptimizerConfig, run
from .problems import ToyProblem, toy_pareto_grid
from .sam import SamConfig
from .weighting import get_method

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

SWEEP_AXES = ("alpha", "rho", "mu", "lr", "conflict_angle")

TOY_METHODS = {
    "ls": dict(mode="off"),
    "ls+gsam": dict(mode="global"),
    "ls+lsam": dict(mode="local", estimator="exact"),
    "ls+samo": dict(mode="joint", estimator="spsa", normalization="layerwise"),
}

# Figure-reproduction defaults: plain descent settles in the sharp basin;
# the perturbed run needs momentum to traverse the watershed between basins
# before settling on the flat plateau.
TOY_FIGURE_STEPS = 5000
TOY_FIGURE_LR = 0.5
TOY_FIGURE_RHO = 0.5
TOY_FIGURE_MOMENTUM = 0.9


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.17g}"


def write_trajectory_csv(path, records, n_tasks: int):
    header = (["iter"] + [f"loss_{k + 1}" for k in range(n_tasks)]
              + ["dir_norm", "lr", "fwd", "bwd"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for rec in records:
            writer.writerow([str(rec.iteration)]
                            + [_fmt(v) for v in rec.losses]
                            + [_fmt(rec.dir_norm), _fmt(rec.lr),
                               str(rec.fwd_delta), str(rec.bwd_delta)])


def read_csv_floats(path) -> tuple[list[str], np.ndarray]:
    """Round-trip reader for the tool's numeric CSV outputs."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    return header, np.asarray(rows)


def save_params_json(theta: LayeredParams, path):
    with open(path, "w") as fh:
        json.dump({"layers": [[float(v) for v in layer] for layer in theta.layers]},
                  fh)
        fh.write("\n")


def load_params_json(path) -> LayeredParams:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"parameter snapshot not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"parameter snapshot {path} is not valid JSON: {err}") from None
    if not isinstance(data, dict) or "layers" not in data:
        raise ConfigError(f"parameter snapshot {path} must contain a 'layers' list")
    return LayeredParams(data["layers"])


def _shared_scope_indices(problem, opt: OptimizerConfig):
    if opt.shared_scope != "trunk_only":
        return None
    return [d for d, own in enumerate(problem.layer_owner) if own is None]


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Execute one configured run, writing trajectory.csv, summary.json,
    final_params.json, and optional diagnostics files."""
    problem = cfg.build_problem()
    weighting = cfg.build_weighting()
    opt = cfg.optimizer_config()
    out_dir = cfg.resolved_output_dir()
    os.makedirs(out_dir, exist_ok=True)
    scope = _shared_scope_indices(problem, opt)

    hooks = []
    if cfg.diagnostics.cosine_every > 0:
        every = cfg.diagnostics.cosine_every

        def cosine_hook(t, theta, gset):
            if t % every != 0:
                return {}
            cm = cosine_matrix([restrict(g, scope) for g in gset.per_task])
            save_cosine_csv(cm, os.path.join(out_dir, f"cosine_{t:06d}.csv"))
            return {"mean_offdiag_cosine": cm.mean_offdiagonal()}

        hooks.append(cosine_hook)

    try:
        trajectory = run(problem, weighting, cfg.sam, opt, hooks=hooks)
    except OptimizationAbort as err:
        write_trajectory_csv(os.path.join(out_dir, "trajectory.csv"),
                             err.trajectory.records, problem.K)
        save_params_json(err.last_params, os.path.join(out_dir, "final_params.json"))
        raise

    write_trajectory_csv(os.path.join(out_dir, "trajectory.csv"),
                         trajectory.records, problem.K)
    save_params_json(trajectory.final_params,
                     os.path.join(out_dir, "final_params.json"))

    final_losses = [float(v) for v in trajectory.final_losses]
    summary = {
        "seed": cfg.seed,
        "final_losses": final_losses,
        "mean_final_loss": float(np.mean(final_losses)),
        "passes": {"forwards": trajectory.forwards, "backwards": trajectory.backwards},
        "steps": opt.steps,
        "config": cfg.echo(),
    }
    if cfg.baselines is not None:
        if len(cfg.baselines) != problem.K:
            raise ConfigError(
                f"'baselines' has {len(cfg.baselines)} entries, problem has {problem.K} tasks")
        metrics = [MetricSpec(name=f"loss_{k + 1}", baseline=b, value=v,
                              higher_is_better=False)
                   for k, (b, v) in enumerate(zip(cfg.baselines, final_losses))]
        summary["delta_m_percent"] = delta_m(metrics)

    if cfg.diagnostics.cosine_every > 0:
        final_grads = [problem.grad(i, trajectory.final_params)
                       for i in range(problem.K)]
        cm = cosine_matrix([restrict(g, scope) for g in final_grads])
        save_cosine_csv(cm, os.path.join(out_dir, "cosine_final.csv"))
        summary["final_mean_offdiag_cosine"] = cm.mean_offdiagonal()

    if cfg.diagnostics.spectrum_at_end:
        report = hessian_spectrum(problem, trajectory.final_params,
                                  k=cfg.diagnostics.k, seed=cfg.seed)
        save_spectrum_json(report, os.path.join(out_dir, "spectrum.json"))
        summary["lambda_max"] = report.lambda_max
        if report.bulk_ratio is not None:
            summary["bulk_ratio"] = report.bulk_ratio

    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def cmd_run(args) -> int:
    overrides = {key: getattr(args, key) for key in
                 ("seed", "output_dir", "weighting", "steps", "lr", "rho", "alpha", "mu")}
    cfg = load_config(args.config, overrides)
    run_experiment(cfg)
    return EXIT_OK


def _write_toy_trajectory(path, records):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "x1", "x2", "f1", "f2"])
        for rec in records:
            x1, x2 = rec.params.layers[0]
            writer.writerow([str(rec.iteration), _fmt(x1), _fmt(x2),
                             _fmt(rec.losses[0]), _fmt(rec.losses[1])])


def cmd_toy_figure(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not methods:
        raise ConfigError("toy-figure needs at least one method")
    for name in methods:
        if name not in TOY_METHODS:
            raise ConfigError(
                f"unknown toy method '{name}'; available: {sorted(TOY_METHODS)}")
    out_dir = args.output_dir
    root = os.environ.get("SAMO_OUTPUT_ROOT")
    if root and not os.path.isabs(out_dir):
        out_dir = os.path.join(root, out_dir)
    os.makedirs(out_dir, exist_ok=True)

    grid = toy_pareto_grid(args.resolution)
    with open(os.path.join(out_dir, "pareto_grid.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x1", "x2", "f1", "f2"])
        for row in grid:
            writer.writerow([_fmt(v) for v in row])

    for name in methods:
        sam = SamConfig(rho=args.rho, **TOY_METHODS[name])
        opt = OptimizerConfig(lr=args.lr, steps=args.steps, schedule="halve_at",
                              momentum=args.momentum, seed=args.seed,
                              record_every=args.record_every,
                              record_params=True, shared_scope="all")
        trajectory = run(ToyProblem(start=(-6.0, 1.0)), get_method("ls"), sam, opt)
        _write_toy_trajectory(
            os.path.join(out_dir, f"trajectory_{name.replace('+', '_')}.csv"),
            trajectory.records)
    return EXIT_OK


def cmd_sweep(args) -> int:
    values = [float(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep needs a non-empty values list")
    if args.axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got '{args.axis}'")
    try:
        with open(args.config) as fh:
            base = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {args.config}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {args.config} is not valid JSON: {err}") from None
    base_cfg = parse_config(base)
    # absolute sub-run dirs so the output-root env prefix is applied only once
    sweep_root = os.path.abspath(base_cfg.resolved_output_dir())
    os.makedirs(sweep_root, exist_ok=True)

    configs = []
    for idx, value in enumerate(values):
        sub_dir = os.path.join(sweep_root, f"value_{idx}")
        data = apply_overrides(base, {
            args.axis: value,
            "seed": base_cfg.seed + idx,
            "output_dir": sub_dir,
        })
        configs.append(parse_config(data))

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            summaries = list(pool.map(run_experiment, configs))
    else:
        summaries = [run_experiment(cfg) for cfg in configs]

    n_tasks = len(summaries[0]["final_losses"])
    header = (["value", "seed"] + [f"loss_{k + 1}" for k in range(n_tasks)]
              + ["mean_loss", "fwd", "bwd", "lambda_max"])
    with open(os.path.join(sweep_root, "sweep_summary.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for value, summary in zip(values, summaries):
            row = ([_fmt(value), str(summary["seed"])]
                   + [_fmt(v) for v in summary["final_losses"]]
                   + [_fmt(summary["mean_final_loss"]),
                      str(summary["passes"]["forwards"]),
                      str(summary["passes"]["backwards"]),
                      _fmt(summary["lambda_max"]) if "lambda_max" in summary else ""])
            writer.writerow(row)
    return EXIT_OK


def cmd_spectrum(args) -> int:
    cfg = load_config(args.config)
    problem = cfg.build_problem()
    theta = load_params_json(args.params)
    report = hessian_spectrum(problem, theta, k=args.k or cfg.diagnostics.k,
                              seed=cfg.seed)
    out_path = args.output
    if out_path is None:
        out_dir = cfg.resolved_output_dir()
        os.makedirs(out_dir, exist_ok=True)
        out_path = os.path.join(out_dir, "spectrum.json")
    save_spectrum_json(report, out_path)
    print(f"lambda_max={report.lambda_max:.6g} converged={report.converged}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="samo",
        description="Multi-task optimization experiments with joint "
                    "global-local sharpness-aware perturbations.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one configured run")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--output-dir", dest="output_dir", default=None)
    p_run.add_argument("--weighting", default=None)
    p_run.add_argument("--steps", type=int, default=None)
    p_run.add_argument("--lr", type=float, default=None)
    p_run.add_argument("--rho", type=float, default=None)
    p_run.add_argument("--alpha", type=float, default=None)
    p_run.add_argument("--mu", type=float, default=None)
    p_run.set_defaults(func=cmd_run)

    p_fig = sub.add_parser("toy-figure",
                           help="trajectories over the two-objective landscape")
    p_fig.add_argument("--output-dir", dest="output_dir", required=True)
    p_fig.add_argument("--methods", default="ls,ls+gsam")
    p_fig.add_argument("--steps", type=int, default=TOY_FIGURE_STEPS)
    p_fig.add_argument("--lr", type=float, default=TOY_FIGURE_LR)
    p_fig.add_argument("--rho", type=float, default=TOY_FIGURE_RHO)
    p_fig.add_argument("--momentum", type=float, default=TOY_FIGURE_MOMENTUM)
    p_fig.add_argument("--seed", type=int, default=0)
    p_fig.add_argument("--resolution", type=int, default=201)
    p_fig.add_argument("--record-every", dest="record_every", type=int, default=1)
    p_fig.set_defaults(func=cmd_toy_figure)

    p_sweep = sub.add_parser("sweep", help="one sub-run per axis value")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--axis", required=True)
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated numeric values")
    p_sweep.add_argument("--jobs", type=int, default=1)
    p_sweep.set_defaults(func=cmd_sweep)

    p_spec = sub.add_parser("spectrum",
                            help="spectrum of a saved parameter snapshot")
    p_spec.add_argument("config")
    p_spec.add_argument("params")
    p_spec.add_argument("--k", type=int, default=None)
    p_spec.add_argument("--output", default=None)
    p_spec.set_defaults(func=cmd_spectrum)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OptimizationAbort as err:
        print(f"numeric failure: {err} (partial trajectory preserved)", file=sys.stderr)
        return EXIT_NUMERIC
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
