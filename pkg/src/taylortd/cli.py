"""Command-line experiment runner.

``ttd <command> [--config PATH] [--set key=value ...] --out DIR``

Every run writes ``manifest.json`` before any work starts, then its CSV and
JSON artifacts. CSVs come in two schemas:

* learning curves (``train``, ``ablation``): ``step, eval_return, critic_loss, model_nll``
* long format (every command): ``seed, condition, metric, value``

Floats are written with ``repr`` so a rerun from the same manifest is
bit-identical. ``TTD_SEED`` (comma-separated integers) overrides the seed list.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import AGENT_NAMES, COMMANDS, ExperimentConfig, build_config, parse_config, parse_overrides

CURVE_COLUMNS = ("step", "eval_return", "critic_loss", "model_nll")
LONG_COLUMNS = ("seed", "condition", "metric", "value")
ABLATIONS = ("full", "no_state_expansion", "dot")
RANDOM_BASELINE_EPISODES = 20


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_curve_csv(path, curve: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for row in zip(*(curve[c] for c in CURVE_COLUMNS)):
            w.writerow([int(row[0])] + [_fmt(float(v)) for v in row[1:]])


def write_long_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LONG_COLUMNS)
        for seed, condition, metric, value in rows:
            w.writerow([seed, condition, metric, _fmt(value)])


def read_csv(path) -> tuple:
    """``(header, rows)`` of a CSV written by this module."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return tuple(rows[0]), rows[1:]


def _clean(value):
    """JSON-safe copy: numpy scalars become Python values, non-finite floats become ``None``."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if np.isfinite(value) else None
    return value


def _write_json(path, data) -> None:
    Path(path).write_text(json.dumps(_clean(data), indent=2, sort_keys=True, allow_nan=False) + "\n")


def _mean_se(values) -> dict:
    v = np.asarray(values, dtype=float)
    se = float(np.std(v, ddof=1) / np.sqrt(len(v))) if len(v) > 1 else float("nan")
    return {"mean": float(np.mean(v)), "se": se, "n": int(len(v))}


def seeds_from_env(default):
    text = os.environ.get("TTD_SEED", "").strip()
    if not text:
        return tuple(default)
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ValueError(f"TTD_SEED must be comma-separated integers, got {text!r}") from None


# ----------------------------------------------------------------------
# environments


def make_env(cfg: ExperimentConfig):
    from .envs import LQEnv, LqSpec, Pendulum
    from .rng import make_rng

    if cfg.env == "pendulum":
        return Pendulum()
    spec = LqSpec.random(cfg.lq_state_dim, cfg.lq_action_dim, make_rng(0), dt=cfg.lq_dt)
    return LQEnv(spec)


# ----------------------------------------------------------------------
# training jobs (top-level so worker processes can pickle them)


def _train_job(job):
    from .agents import train_agent
    from .checkpoint import save_checkpoint

    cfg, kind, seed, curve_path, ckpt_path = job
    result = train_agent(kind, make_env(cfg), cfg.agent, seed)
    curve = {c: result[c] for c in CURVE_COLUMNS}
    write_curve_csv(curve_path, curve)
    save_checkpoint(ckpt_path, result["agent"].parameters())
    return curve


def _run_jobs(jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [_train_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_train_job, jobs))


def _curve_rows(condition, seed, curve, baseline):
    returns = np.asarray(curve["eval_return"])
    return [
        (seed, condition, "final_return", float(returns[-1])),
        (seed, condition, "best_return", float(returns.max())),
        (seed, condition, "best_improvement", float(returns.max() - baseline)),
    ]


def _train_like(cfg: ExperimentConfig, out: Path, conditions, artifacts: list) -> dict:
    """Train every ``(condition, agent config, kind)`` for every seed; write curves and a summary."""
    from .agents import random_policy_return

    env = make_env(cfg)
    baseline = random_policy_return(env, RANDOM_BASELINE_EPISODES, 0)
    (out / "curves").mkdir(exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    jobs, labels = [], []
    for condition, agent_cfg, kind in conditions:
        job_cfg = replace(cfg, agent=agent_cfg)
        for seed in cfg.seeds:
            curve_path = out / "curves" / f"{condition}_seed{seed}.csv"
            ckpt_path = out / "checkpoints" / f"{condition}_seed{seed}.ttd"
            jobs.append((job_cfg, kind, seed, curve_path, ckpt_path))
            labels.append((condition, seed))
            artifacts += [str(curve_path.relative_to(out)), str(ckpt_path.relative_to(out))]
    curves = _run_jobs(jobs, cfg.workers)
    rows = [(0, "random_policy", "mean_return", baseline)]
    for (condition, seed), curve in zip(labels, curves):
        rows += _curve_rows(condition, seed, curve, baseline)
    summary = {"random_policy_return": baseline, "conditions": {}}
    for condition, _, _ in conditions:
        per = [r for r in rows if r[1] == condition]
        summary["conditions"][condition] = {
            metric: _mean_se([r[3] for r in per if r[2] == metric])
            for metric in ("final_return", "best_return", "best_improvement")
        }
        summary["conditions"][condition]["seeds_improved_600"] = int(
            sum(r[3] >= 600.0 for r in per if r[2] == "best_improvement"))
    return rows, summary


def run_train(cfg, out, artifacts):
    conditions = [(name, cfg.agent, AGENT_NAMES[name]) for name in cfg.agents]
    return _train_like(cfg, out, conditions, artifacts)


def ablation_configs(agent_cfg) -> dict:
    """Ablation variants keyed by the names in ``ABLATIONS``."""
    return {
        "full": agent_cfg,
        "no_state_expansion": replace(agent_cfg, state_expansion=False),
        "dot": replace(agent_cfg, similarity="dot"),
    }


def run_ablation(cfg, out, artifacts):
    conditions = [(name, c, "tatd3") for name, c in ablation_configs(cfg.agent).items()]
    return _train_like(cfg, out, conditions, artifacts)


# ----------------------------------------------------------------------
# analyses


def _lq_problem(cfg, seed):
    from .analysis import LinearLqProblem
    from .rng import make_rng

    return LinearLqProblem.random(cfg.lq_state_dim, cfg.lq_action_dim, make_rng(seed), features=cfg.features,
                                  dt=cfg.lq_dt, gamma=cfg.agent.gamma, lambda_a=cfg.agent.lambda_a,
                                  lambda_s=cfg.agent.lambda_s)


def run_variance(cfg, out, artifacts):
    from .analysis import measure_update_variance, sign_test_p, total_variance_decomposition, \
        variance_across_training
    from .rng import make_rng

    problem = _lq_problem(cfg, cfg.seeds[0])
    report = measure_update_variance(problem, cfg.variance_states, cfg.seeds)
    rows = report.rows("untrained")
    dec = total_variance_decomposition(problem, cfg.variance_states, cfg.variance_inner, make_rng(cfg.seeds[0]))
    for metric in ("var_sample", "expected_inner_var", "var_expected", "gap", "gap_se"):
        rows.append((cfg.seeds[0], "decomposition", metric, getattr(dec, metric)))
    stages = variance_across_training(lambda s: _lq_problem(cfg, s), cfg.variance_checkpoints, cfg.seeds,
                                      n_states=cfg.variance_states)
    for rep in stages:
        rows += rep.rows(f"step={rep.step}")
    summary = {
        "untrained": {"taylor": _mean_se(report.taylor), "sample_based": _mean_se(report.sample_based),
                      "taylor_lower": report.taylor_lower, "n_seeds": report.n_seeds,
                      "sign_test_p": sign_test_p(report.taylor_lower, report.n_seeds)},
        "decomposition": {"gap": dec.gap, "gap_se": dec.gap_se, "closes_3se": dec.closes(3.0)},
        "across_training": {str(rep.step): {"taylor": _mean_se(rep.taylor),
                                            "sample_based": _mean_se(rep.sample_based),
                                            "taylor_lower": rep.taylor_lower} for rep in stages},
    }
    return rows, summary


def run_stability(cfg, out, artifacts):
    from .analysis import stability_experiment

    rows, runs = [], []
    for seed in cfg.seeds:
        run = stability_experiment(seed, dt=cfg.stability_dt, n_features=cfg.stability_features,
                                   n_samples=cfg.stability_samples, state_dim=cfg.lq_state_dim,
                                   action_dim=cfg.lq_action_dim, gamma=cfg.agent.gamma,
                                   lambda_a=cfg.agent.lambda_a, eta_fraction=cfg.stability_eta_fraction)
        rep = run.report
        cond = f"dt={cfg.stability_dt!r}"
        rows += [(seed, cond, "min_eig_A", rep.min_eig_A), (seed, cond, "min_eig_A_tilde", rep.min_eig_A_tilde),
                 (seed, cond, "min_eig_M", rep.min_eig_M), (seed, cond, "step_threshold", rep.step_threshold),
                 (seed, cond, "eta", run.eta), (seed, cond, "a_tilde_psd", float(rep.a_tilde_psd)),
                 (seed, cond, "converged", float(run.converged)), (seed, cond, "iterations", float(run.iterations)),
                 (seed, cond, "final_error", run.error)]
        runs.append(run)
    summary = {
        "dt": cfg.stability_dt,
        "a_tilde_psd": int(sum(r.report.a_tilde_psd for r in runs)),
        "converged": int(sum(r.converged for r in runs)),
        "n_seeds": len(runs),
        "min_eig_A_tilde": _mean_se([r.report.min_eig_A_tilde for r in runs]),
    }
    return rows, summary


def run_toy(cfg, out, artifacts):
    from .analysis import spearman, toy_advantage, toy_sweep

    rows = toy_sweep(cfg.toy_dims, cfg.toy_regimes, cfg.seeds, lambda_x=cfg.toy_lambda_x, steps=cfg.toy_steps)
    adv = toy_advantage(rows)
    summary = {"advantage": {}, "spearman": {}}
    for regime in cfg.toy_regimes:
        dims = sorted(d for r, d in adv if r == regime)
        summary["advantage"][regime] = {str(d): adv[(regime, d)] for d in dims}
        summary["spearman"][regime] = spearman(dims, [adv[(regime, d)] for d in dims])
    return rows, summary


RUNNERS = {"train": run_train, "variance": run_variance, "stability": run_stability, "toy": run_toy,
           "ablation": run_ablation}


# ----------------------------------------------------------------------
# driver


def run_experiment(cfg: ExperimentConfig, out) -> int:
    """Run ``cfg.command`` writing artifacts under ``out``; returns the exit status."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": cfg.to_dict(),
        "version": __version__,
        "seeds": list(cfg.seeds),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "status": "running",
        "artifacts": [],
    }
    _write_json(out / "manifest.json", manifest)
    artifacts = []
    try:
        rows, summary = RUNNERS[cfg.command](cfg, out, artifacts)
        write_long_csv(out / "results.csv", rows)
        _write_json(out / "summary.json", summary)
        artifacts += ["results.csv", "summary.json"]
        status, code = "complete", 0
    except Exception as exc:  # recorded in the manifest, then reported
        status, code = f"failed: {type(exc).__name__}: {exc}", 1
        print(f"ttd {cfg.command}: {status}", file=sys.stderr)
    manifest.update(status=status, finished=time.strftime("%Y-%m-%dT%H:%M:%S%z"),
                    artifacts=[a for a in artifacts if (out / a).exists()])
    _write_json(out / "manifest.json", manifest)
    return code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="ttd", description="Taylor TD experiments")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="flat key = value file (or a JSON manifest)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    parser.add_argument("--out", required=True, help="output directory")
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config, args.overrides)
        values = {**cfg.to_dict(), "command": args.command}
        values["seeds"] = list(seeds_from_env(cfg.seeds))
        cfg = build_config(values)
    except (KeyError, ValueError, OSError) as exc:
        parser.exit(2, f"ttd: configuration error: {exc}\n")
    return run_experiment(cfg, args.out)


__all__ = ["main", "run_experiment", "ablation_configs", "write_curve_csv", "write_long_csv", "read_csv",
           "CURVE_COLUMNS", "LONG_COLUMNS", "ABLATIONS", "parse_overrides"]


if __name__ == "__main__":
    sys.exit(main())
