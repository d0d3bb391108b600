"""Sparse-reward evaluation environments: unichain, noisy Mountain Car and
2-D point mazes.

All environments share one small episodic interface::

    raw = env.reset(rng)
    res = env.step(action, rng)      # StepResult(next_state, extrinsic_reward, done)
    obs = env.encode_state(res.next_state)

Raw states are in the environment's physical units; ``encode_state`` maps
them into the bounded representation fed to models and policies.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import Rng


class InvalidAction(ValueError):
    pass


class UnknownLayout(KeyError):
    pass


@dataclass(frozen=True)
class Discrete:
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("discrete action spaces need at least 2 actions")

    @property
    def dim(self) -> int:
        return 1

    def contains(self, a) -> bool:
        a = np.asarray(a)
        return a.size == 1 and float(a) == int(a) and 0 <= int(a) < self.n


@dataclass(frozen=True)
class Continuous:
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        low = np.asarray(self.low, dtype=np.float64)
        high = np.asarray(self.high, dtype=np.float64)
        if low.shape != high.shape or np.any(low >= high):
            raise ValueError("continuous action bounds need low < high elementwise")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @property
    def dim(self) -> int:
        return self.low.shape[0]

    def contains(self, a) -> bool:
        a = np.asarray(a, dtype=np.float64)
        return a.shape == self.low.shape and bool(np.all(a >= self.low - 1e-12) and np.all(a <= self.high + 1e-12))


ActionSpec = Discrete | Continuous


@dataclass(frozen=True)
class StepResult:
    next_state: np.ndarray
    extrinsic_reward: float
    done: bool


class Env:
    """Common surface. Subclasses set ``action_spec``, ``state_low``/``state_high``
    (raw units) and ``max_steps``."""

    action_spec: ActionSpec
    state_low: np.ndarray
    state_high: np.ndarray
    max_steps: int
    name: str = "env"

    @property
    def state_dim(self) -> int:
        return self.state_low.shape[0]

    @property
    def obs_low(self) -> np.ndarray:
        return -np.ones(self.state_dim)

    @property
    def obs_high(self) -> np.ndarray:
        return np.ones(self.state_dim)

    def encode_state(self, raw: np.ndarray) -> np.ndarray:
        raw = np.asarray(raw, dtype=np.float64)
        return 2.0 * (raw - self.state_low) / (self.state_high - self.state_low) - 1.0

    def encode_action(self, action) -> np.ndarray:
        """Action as model input: discrete indices map evenly onto [-1, 1]."""
        if isinstance(self.action_spec, Discrete):
            a = np.asarray(action, dtype=np.float64).reshape(np.shape(action) + (1,))
            return 2.0 * a / (self.action_spec.n - 1) - 1.0
        spec = self.action_spec
        return 2.0 * (np.asarray(action, dtype=np.float64) - spec.low) / (spec.high - spec.low) - 1.0

    def coverage_cell(self, raw: np.ndarray) -> int:
        raise NotImplementedError

    @property
    def coverage_cells(self) -> int:
        raise NotImplementedError

    def coverage_metadata(self) -> dict:
        return {}


# ---------------------------------------------------------------------------
# Unichain
# ---------------------------------------------------------------------------

GO_LEFT, STAY, GO_RIGHT = 0, 1, 2


class UnichainEnv(Env):
    """Chain of ``length`` states; actions {go-left, stay, go-right}.

    The agent starts at index 1. Reward depends on the state being visited:
    0.001 at index 0, 1.0 at the last index, 0 elsewhere. There is no
    terminal state; episodes end at ``max_steps``.
    """

    name = "unichain"

    def __init__(self, length: int = 50, max_steps: int = 400, start: int = 1):
        if length < 3:
            raise ValueError("unichain needs at least 3 states")
        self.length = length
        self.max_steps = max_steps
        self.start = start
        self.action_spec = Discrete(3)
        self.state_low = np.array([0.0])
        self.state_high = np.array([float(length - 1)])
        self.index = start

    @property
    def obs_low(self):
        return np.zeros(1)

    def reset(self, rng: Rng | None = None) -> np.ndarray:
        self.index = self.start
        return np.array([float(self.index)])

    def reward(self, index: int) -> float:
        if index == 0:
            return 0.001
        if index == self.length - 1:
            return 1.0
        return 0.0

    def step(self, action, rng: Rng | None = None) -> StepResult:
        if not self.action_spec.contains(action):
            raise InvalidAction(f"unichain action must be in {{0,1,2}}, got {action!r}")
        a = int(action)
        self.index = min(max(self.index + (a - 1), 0), self.length - 1)
        return StepResult(np.array([float(self.index)]), self.reward(self.index), False)

    def encode_state(self, raw):
        return np.asarray(raw, dtype=np.float64) / (self.length - 1)

    def coverage_cell(self, raw) -> int:
        return int(round(float(np.asarray(raw).reshape(-1)[0])))

    @property
    def coverage_cells(self) -> int:
        return self.length


# ---------------------------------------------------------------------------
# Mountain Car
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseMode:
    kind: str = "none"                 # none | homoskedastic | heteroskedastic
    sigma: float = 0.005               # homoskedastic std, heteroskedastic base std
    c_v: float = 2.0
    c_p: float = 2.0
    width: float = 0.05

    def __post_init__(self):
        if self.kind not in ("none", "homoskedastic", "heteroskedastic"):
            raise ValueError(f"unknown noise mode {self.kind!r}")
        if self.sigma <= 0:
            raise ValueError("noise sigma must be positive")


class MountainCarEnv(Env):
    """Classic Mountain Car with optional additive Gaussian transition noise.

    Reward is 1 on reaching ``x >= 0.5`` (which ends the episode) and 0
    otherwise.
    """

    name = "mountain_car"
    MIN_POS, MAX_POS = -1.2, 0.6
    MAX_SPEED = 0.07
    GOAL_POS = 0.5
    FORCE, GRAVITY = 0.001, 0.0025
    VALLEY = -math.pi / 6

    def __init__(self, noise: NoiseMode | str = "none", max_steps: int = 1000, **noise_kw):
        if isinstance(noise, str):
            noise = NoiseMode(noise, **noise_kw)
        self.noise = noise
        self.max_steps = max_steps
        self.action_spec = Discrete(3)
        self.state_low = np.array([self.MIN_POS, -self.MAX_SPEED])
        self.state_high = np.array([self.MAX_POS, self.MAX_SPEED])
        self.state = np.array([-0.5, 0.0])

    def reset(self, rng: Rng) -> np.ndarray:
        self.state = np.array([rng.uniform(-0.6, -0.4), 0.0])
        return self.state.copy()

    @classmethod
    def dynamics(cls, state: np.ndarray, action: int) -> np.ndarray:
        """Noise-free canonical transition."""
        x, v = float(state[0]), float(state[1])
        v = v + (action - 1) * cls.FORCE - cls.GRAVITY * math.cos(3.0 * x)
        v = min(max(v, -cls.MAX_SPEED), cls.MAX_SPEED)
        x = x + v
        x = min(max(x, cls.MIN_POS), cls.MAX_POS)
        if x == cls.MIN_POS and v < 0:
            v = 0.0
        return np.array([x, v])

    def noise_sigma(self, state: np.ndarray) -> float:
        if self.noise.kind == "none":
            return 0.0
        if self.noise.kind == "homoskedastic":
            return self.noise.sigma
        return heteroskedastic_sigma(self.noise, state)

    def step(self, action, rng: Rng) -> StepResult:
        if not self.action_spec.contains(action):
            raise InvalidAction(f"mountain car action must be in {{0,1,2}}, got {action!r}")
        nxt = self.dynamics(self.state, int(action))
        sigma = self.noise_sigma(self.state)
        if sigma > 0:
            # sigma is expressed in encoded units, i.e. relative to the half-range of each dimension
            half = 0.5 * (self.state_high - self.state_low)
            nxt = nxt + sigma * half * rng.standard_normal(2)
            nxt = np.clip(nxt, self.state_low, self.state_high)
        self.state = nxt
        done = bool(nxt[0] >= self.GOAL_POS)
        return StepResult(nxt.copy(), 1.0 if done else 0.0, done)

    GRID = 20

    def coverage_cell(self, raw) -> int:
        u = (np.asarray(raw, dtype=np.float64) - self.state_low) / (self.state_high - self.state_low)
        ij = np.clip((u * self.GRID).astype(int), 0, self.GRID - 1)
        return int(ij[0] * self.GRID + ij[1])

    @property
    def coverage_cells(self) -> int:
        return self.GRID * self.GRID

    def coverage_metadata(self):
        return {"grid": [self.GRID, self.GRID], "low": self.state_low.tolist(), "high": self.state_high.tolist()}


def heteroskedastic_sigma(noise: NoiseMode, state: np.ndarray) -> float:
    """State-dependent noise std: grows with speed and near the valley floor."""
    x, v = float(state[0]), float(state[1])
    speed = noise.c_v * abs(v) / MountainCarEnv.MAX_SPEED
    valley = noise.c_p * math.exp(-((x - MountainCarEnv.VALLEY) ** 2) / noise.width)
    return noise.sigma * (1.0 + speed + valley)


# ---------------------------------------------------------------------------
# Point mazes
# ---------------------------------------------------------------------------

_LAYOUTS = {
    "open": [
        "########",
        "#S.....#",
        "#......#",
        "#......#",
        "#......#",
        "#......#",
        "#.....G#",
        "########",
    ],
    "u_shape": [
        "########",
        "#S.....#",
        "#......#",
        "#####..#",
        "#......#",
        "#G.....#",
        "########",
    ],
    "double_u": [
        "##########",
        "#S.......#",
        "#........#",
        "######...#",
        "#........#",
        "#........#",
        "#...######",
        "#........#",
        "#G.......#",
        "##########",
    ],
    "obstacles": [
        "##########",
        "#S.......#",
        "#..#...#.#",
        "#.....#..#",
        "#.##.....#",
        "#....##..#",
        "#.#......#",
        "#...#..#.#",
        "#.......G#",
        "##########",
    ],
}


@dataclass(frozen=True)
class MazeLayout:
    walls: np.ndarray          # bool (rows, cols); row 0 is y in [0, 1)
    start: tuple[int, int]     # (row, col)
    goal: tuple[int, int]

    @property
    def shape(self) -> tuple[int, int]:
        return self.walls.shape

    def free_cells(self) -> list[tuple[int, int]]:
        return [tuple(rc) for rc in np.argwhere(~self.walls)]


def parse_layout(lines: list[str]) -> MazeLayout:
    """Parse a text grid: '#' wall, '.' free, 'S' start, 'G' goal."""
    rows = [ln.rstrip("\n") for ln in lines if ln.strip()]
    width = max(len(r) for r in rows)
    walls = np.ones((len(rows), width), dtype=bool)
    start = goal = None
    for i, row in enumerate(rows):
        for j, ch in enumerate(row):
            if ch == "#":
                continue
            if ch not in ".SG":
                raise ValueError(f"bad maze character {ch!r} at row {i}, col {j}")
            walls[i, j] = False
            if ch == "S":
                start = (i, j)
            elif ch == "G":
                goal = (i, j)
    if start is None or goal is None:
        raise ValueError("maze layout needs one 'S' and one 'G'")
    return MazeLayout(walls, start, goal)


def maze_layout(name: str) -> MazeLayout:
    if name not in _LAYOUTS:
        raise UnknownLayout(f"unknown maze layout {name!r}; choose from {sorted(_LAYOUTS)}")
    return parse_layout(_LAYOUTS[name])


def load_layout(path: str | Path) -> MazeLayout:
    return parse_layout(Path(path).read_text().splitlines())


def grid_shortest_path(layout: MazeLayout, src=None, dst=None) -> int | None:
    """4-connected BFS distance between two free cells (None if unreachable)."""
    src = layout.start if src is None else tuple(src)
    dst = layout.goal if dst is None else tuple(dst)
    seen = {src: 0}
    q = deque([src])
    rows, cols = layout.shape
    while q:
        r, c = q.popleft()
        if (r, c) == dst:
            return seen[(r, c)]
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nr, nc = r + dr, c + dc
            if 0 <= nr < rows and 0 <= nc < cols and not layout.walls[nr, nc] and (nr, nc) not in seen:
                seen[(nr, nc)] = seen[(r, c)] + 1
                q.append((nr, nc))
    return None


class MazeEnv(Env):
    """Point mass in a walled grid. State ``(x, y, vx, vy)`` in cell units,
    action is a 2-D force bounded per axis.

    Integration per step: ``v <- damping * (v + dt * force)``, then each axis
    moves by ``dt * v``; an axis move that would enter a wall cell is undone
    and that velocity component zeroed.
    """

    name = "maze"

    def __init__(
        self,
        layout: MazeLayout | str = "u_shape",
        dt: float = 0.1,
        damping: float = 0.9,
        max_force: float = 1.0,
        goal_radius: float = 0.5,
        max_steps: int = 5000,
    ):
        self.layout = maze_layout(layout) if isinstance(layout, str) else layout
        self.layout_name = layout if isinstance(layout, str) else "custom"
        self.dt, self.damping, self.goal_radius = dt, damping, goal_radius
        self.max_steps = max_steps
        self.action_spec = Continuous(-max_force * np.ones(2), max_force * np.ones(2))
        rows, cols = self.layout.shape
        # steady-state speed under full force bounds the velocity box
        self.max_speed = damping * dt * max_force / (1.0 - damping)
        self.state_low = np.array([0.0, 0.0, -self.max_speed, -self.max_speed])
        self.state_high = np.array([float(cols), float(rows), self.max_speed, self.max_speed])
        self.start_pos = np.array([self.layout.start[1] + 0.5, self.layout.start[0] + 0.5])
        self.goal = np.array([self.layout.goal[1] + 0.5, self.layout.goal[0] + 0.5])
        self.state = np.concatenate([self.start_pos, np.zeros(2)])

    def is_wall(self, x: float, y: float) -> bool:
        rows, cols = self.layout.shape
        c, r = int(math.floor(x)), int(math.floor(y))
        if r < 0 or c < 0 or r >= rows or c >= cols:
            return True
        return bool(self.layout.walls[r, c])

    def reset(self, rng: Rng | None = None) -> np.ndarray:
        self.state = np.concatenate([self.start_pos, np.zeros(2)])
        return self.state.copy()

    def step(self, action, rng: Rng | None = None) -> StepResult:
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (2,) or not np.all(np.isfinite(a)):
            raise InvalidAction(f"maze action must be a finite 2-vector, got {action!r}")
        a = np.clip(a, self.action_spec.low, self.action_spec.high)
        x, y, vx, vy = self.state
        vx = self.damping * (vx + self.dt * a[0])
        vy = self.damping * (vy + self.dt * a[1])
        nx = x + self.dt * vx
        if self.is_wall(nx, y):
            nx, vx = x, 0.0
        ny = y + self.dt * vy
        if self.is_wall(nx, ny):
            ny, vy = y, 0.0
        self.state = np.array([nx, ny, vx, vy])
        done = bool(np.hypot(nx - self.goal[0], ny - self.goal[1]) <= self.goal_radius)
        return StepResult(self.state.copy(), 1.0 if done else 0.0, done)

    def goal_distance(self, raw) -> float:
        raw = np.asarray(raw)
        return float(np.hypot(raw[0] - self.goal[0], raw[1] - self.goal[1]))

    def coverage_cell(self, raw) -> int:
        raw = np.asarray(raw)
        cols = self.layout.shape[1]
        return int(math.floor(raw[1])) * cols + int(math.floor(raw[0]))

    @property
    def coverage_cells(self) -> int:
        return int((~self.layout.walls).sum())

    def coverage_metadata(self):
        return {"grid": list(self.layout.shape), "cells": "free maze cells"}


def make_env(kind: str, **kw) -> Env:
    if kind == "unichain":
        return UnichainEnv(**kw)
    if kind == "mountain_car":
        return MountainCarEnv(**kw)
    if kind == "maze":
        return MazeEnv(**kw)
    raise ValueError(f"unknown environment kind {kind!r}")
