"""Per-run metric series and cross-seed aggregation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envs import Env, MazeEnv
from .planner import RunTrace


@dataclass
class MetricSeries:
    coverage: np.ndarray
    cum_reward: np.ndarray
    solve_step: int | None
    min_goal_distance: np.ndarray | None = None
    mean_bonus: np.ndarray | None = None      # per model update


def coverage(trace: RunTrace, env: Env) -> np.ndarray:
    """Cumulative fraction of coverage cells visited, starting from the initial state."""
    if len(trace) == 0:
        raise ValueError("coverage needs a non-empty trace")
    seen = {trace.initial_cell}
    out = np.empty(len(trace))
    for i, c in enumerate(trace.cells):
        seen.add(int(c))
        out[i] = len(seen)
    return out / env.coverage_cells


def series(trace: RunTrace, env: Env) -> MetricSeries:
    solve = next((i + 1 for i, r in enumerate(trace.r_ext) if r >= 1.0), None)
    dist = None
    if isinstance(env, MazeEnv):
        d = np.hypot(trace.states[:, 0] - env.goal[0], trace.states[:, 1] - env.goal[1])
        dist = np.minimum.accumulate(d)
    bonus = None
    if trace.updates and any("eig" in u for u in trace.updates):
        bonus = np.array([u.get("eig", np.nan) for u in trace.updates])
    return MetricSeries(coverage(trace, env), np.cumsum(trace.r_ext), solve, dist, bonus)


def pad(runs: list[np.ndarray]) -> np.ndarray:
    """Stack series of unequal length, carrying each one's last value forward."""
    n = max(len(r) for r in runs)
    out = np.empty((len(runs), n))
    for i, r in enumerate(runs):
        out[i, : len(r)] = r
        out[i, len(r):] = r[-1] if len(r) else np.nan
    return out


@dataclass
class Summary:
    median: np.ndarray
    q25: np.ndarray
    q75: np.ndarray
    terminal_mean: float
    terminal_ci: float        # half-width of the 95% normal interval


def aggregate(runs: list[np.ndarray]) -> Summary:
    """Per-step median and quartile band plus the terminal mean with a 95% CI."""
    if not runs:
        raise ValueError("aggregate needs at least one run")
    x = pad([np.asarray(r, dtype=np.float64) for r in runs])
    q25, med, q75 = np.percentile(x, [25, 50, 75], axis=0)
    term = x[:, -1]
    sd = term.std(ddof=1) if len(term) > 1 else 0.0
    return Summary(med, q25, q75, float(term.mean()), float(1.96 * sd / np.sqrt(len(term))))
