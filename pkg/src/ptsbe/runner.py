"""Build components from a config, execute seeds and persist CSV results."""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from .agents import make_agent
from .config import ExperimentConfig
from .dynamics import make_model
from .envs import Discrete, load_layout, make_env
from .metrics import aggregate, coverage
from .numerics import Rng
from .planner import RunTrace, run

AGG_METRICS = ("coverage", "cum_reward")


def build_env(spec: dict):
    kw = {k: v for k, v in spec.items() if k != "kind"}
    if spec["kind"] == "maze" and "layout_file" in kw:
        kw["layout"] = load_layout(kw.pop("layout_file"))
    return make_env(spec["kind"], **kw)


def build_model(spec: dict | None, env, seed: int):
    if spec is None:
        return None
    kw = {k: v for k, v in spec.items() if k != "kind"}
    if spec["kind"] in ("dk", "de"):
        kw.setdefault("seed", seed)
    for k in ("hidden",):
        if k in kw:
            kw[k] = tuple(kw[k])
    action_dim = 1 if isinstance(env.action_spec, Discrete) else env.action_spec.dim
    return make_model(spec["kind"], env.state_dim, action_dim, state_low=env.obs_low, state_high=env.obs_high, **kw)


def build_agent(spec: dict, env, seed: int):
    kw = {k: v for k, v in spec.items() if k != "kind"}
    return make_agent(spec["kind"], env.state_dim, env.action_spec, seed=seed, **kw)


def run_seed(cfg: ExperimentConfig, seed: int):
    """One full run; every random draw descends from ``Rng(seed)``."""
    env = build_env(cfg.env)
    model = build_model(cfg.model, env, seed)
    agent = build_agent(cfg.agent, env, seed)
    trace = run(env, model, agent, cfg.planner, Rng(seed).child("run"))
    return trace, env


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def trace_header(trace: RunTrace) -> list[str]:
    ds, da = trace.states.shape[1], trace.actions.shape[1]
    return (["step"] + [f"state_{i}" for i in range(ds)] + [f"action_{i}" for i in range(da)]
            + ["r_ext", "bonus", "done", "coverage"])


def write_trace_csv(path: Path, trace: RunTrace, env) -> None:
    cov = coverage(trace, env)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trace_header(trace))
        for i in range(len(trace)):
            row = [i + 1, *trace.states[i], *trace.actions[i], trace.r_ext[i], trace.bonus[i],
                   bool(trace.done[i]), cov[i]]
            w.writerow([_fmt(v) for v in row])


def read_trace_csv(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    data = np.array(body, dtype=np.float64).reshape(len(body), len(header))
    return {h: data[:, j] for j, h in enumerate(header)}


def write_updates_csv(path: Path, trace: RunTrace) -> None:
    keys: list[str] = []
    for u in trace.updates:
        keys.extend(k for k in u if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for u in trace.updates:
            w.writerow([_fmt(u[k]) if k in u and u[k] is not None else "" for k in keys])


def read_updates_csv(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0]:
        return {}
    header, body = rows[0], rows[1:]
    return {h: np.array([float(r[j]) if r[j] else np.nan for r in body]) for j, h in enumerate(header)}


def write_aggregate(out: Path) -> Path:
    """Aggregate every ``trace_seed*.csv`` in ``out`` into ``aggregate.csv``.

    Depends only on the trace files, so ``report`` reproduces it exactly.
    """
    traces = sorted(out.glob("trace_seed*.csv"), key=lambda p: int(p.stem.removeprefix("trace_seed")))
    if not traces:
        raise FileNotFoundError(f"no trace CSVs in {out}")
    cols = [read_trace_csv(p) for p in traces]
    series = {
        "coverage": [c["coverage"] for c in cols],
        "cum_reward": [np.cumsum(c["r_ext"]) for c in cols],
    }
    path = out / "aggregate.csv"
    summary = {"n_runs": len(cols), "terminal": {}}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "metric", "median", "q25", "q75"])
        for metric in AGG_METRICS:
            agg = aggregate(series[metric])
            for i in range(len(agg.median)):
                w.writerow([i + 1, metric, _fmt(agg.median[i]), _fmt(agg.q25[i]), _fmt(agg.q75[i])])
            summary["terminal"][metric] = {"mean": agg.terminal_mean, "ci95": agg.terminal_ci}
    solves = []
    for c in cols:
        hit = np.flatnonzero(c["r_ext"] >= 1.0)
        solves.append(int(hit[0]) + 1 if len(hit) else None)
    summary["solve_steps"] = solves
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return path


def _seed_job(args):
    cfg, seed, out = args
    trace, env = run_seed(cfg, seed)
    write_trace_csv(out / f"trace_seed{seed}.csv", trace, env)
    write_updates_csv(out / f"updates_seed{seed}.csv", trace)
    return seed


def default_out(cfg: ExperimentConfig, out: str | None) -> Path:
    if out:
        return Path(out)
    if cfg.out:
        return Path(cfg.out)
    return Path(os.environ.get("PTSBE_OUT", "results")) / cfg.name


def run_experiment(cfg: ExperimentConfig, out: Path, jobs: int = 1, seed_offset: int = 0) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    seeds = [s + seed_offset for s in cfg.seeds]
    resolved = cfg.resolved() | {"seeds": seeds, "seed_offset": seed_offset}
    env = build_env(cfg.env)
    resolved["coverage_grid"] = env.coverage_metadata() | {"cells": env.coverage_cells}
    with open(out / "config.resolved.yaml", "w") as fh:
        yaml.safe_dump(resolved, fh, sort_keys=True)
    jobs_list = [(cfg, s, out) for s in seeds]
    if jobs <= 1:
        for j in jobs_list:
            _seed_job(j)
    else:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            list(ex.map(_seed_job, jobs_list))
    return write_aggregate(out)
