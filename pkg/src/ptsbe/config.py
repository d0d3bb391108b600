"""Experiment configuration: YAML in, validated dataclasses out.

A config fully determines a run. Unspecified fields take library defaults
and the resolved mapping (defaults materialised) is written next to the
results for provenance.

Example::

    name: unichain-pts-de
    env: {kind: unichain, length: 50}
    model: {kind: de, n_members: 5}
    agent: {kind: ppo}
    planner:
      T: 400
      mode: pts_be
      bonus: {kind: eig, eta: 1.0}
    seeds: [0, 1, 2]
"""

from __future__ import annotations

import copy
import dataclasses
import inspect
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .agents import PpoConfig, SacConfig
from .dynamics import MODEL_KINDS, DynamicsModel
from .envs import MazeEnv, MountainCarEnv, NoiseMode, UnichainEnv
from .intrinsic import BonusSpec
from .planner import PlannerConfig

ENV_KINDS = ("unichain", "mountain_car", "maze")
AGENT_KINDS = ("ppo", "sac", "random")


class ConfigError(ValueError):
    """Invalid experiment config; carries the file and the offending field."""

    def __init__(self, message: str, path: str | None = None, field_name: str | None = None):
        self.path = path
        self.field_name = field_name
        where = ":".join(x for x in (path, field_name) if x)
        super().__init__(f"{where}: {message}" if where else message)


@dataclass
class ExperimentConfig:
    name: str
    env: dict
    model: dict | None
    agent: dict
    planner: PlannerConfig
    seeds: list[int]
    out: str | None = None
    source: str | None = None
    raw: dict = field(default_factory=dict, repr=False)

    def resolved(self) -> dict:
        """Plain mapping with every default filled in."""
        planner = dataclasses.asdict(self.planner)
        planner["monitor_bonuses"] = list(planner["monitor_bonuses"])
        agent = dict(self.agent)
        kind = agent.get("kind")
        defaults = {"ppo": PpoConfig, "sac": SacConfig}.get(kind)
        if defaults is not None:
            base = dataclasses.asdict(defaults())
            base.update({k: v for k, v in agent.items() if k != "kind"})
            agent = {"kind": kind, **{k: list(v) if isinstance(v, tuple) else v for k, v in base.items()}}
        return {
            "name": self.name,
            "env": dict(self.env),
            "model": None if self.model is None else dict(self.model),
            "agent": agent,
            "planner": planner,
            "seeds": list(self.seeds),
            "out": self.out,
        }


def _check_keys(d: dict, allowed, path, prefix):
    for k in d:
        if k not in allowed:
            raise ConfigError(f"unknown key {k!r}", path, f"{prefix}.{k}" if prefix else k)


def _dataclass_defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def _signature_defaults(*fns) -> dict:
    out = {}
    for fn in fns:
        for name, p in inspect.signature(fn).parameters.items():
            if p.default is not inspect.Parameter.empty and name not in ("state_low", "state_high"):
                out[name] = p.default
    return out


_ENV_DEFAULTS = {
    "unichain": _signature_defaults(UnichainEnv.__init__),
    "mountain_car": _signature_defaults(MountainCarEnv.__init__) | _dataclass_defaults(NoiseMode) | {"noise": "none"},
    "maze": _signature_defaults(MazeEnv.__init__) | {"layout_file": ""},
}


def _coerce(value, default, path, where):
    """Match ``value`` to the type of ``default``.

    Numbers written like ``3e-4`` load from YAML as strings, so numeric
    strings are accepted wherever a float is expected.
    """
    def number():
        if isinstance(value, bool):
            raise ConfigError(f"expected a number, got {value!r}", path, where)
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"expected a number, got {value!r}", path, where) from None

    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", path, where)
        return value
    if isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        x = number()
        if not x.is_integer():
            raise ConfigError(f"expected an integer, got {value!r}", path, where)
        return int(x)
    if isinstance(default, float):
        return number()
    if default is None:
        if isinstance(value, str):
            return number()
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {value!r}", path, where)
        return tuple(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"expected a string, got {value!r}", path, where)
    return value


def _typed(d: dict, defaults: dict, path, prefix, skip=("kind",)) -> dict:
    """Check ``d`` against known keys and coerce each value to its default's type."""
    out = {}
    for k, v in d.items():
        if k in skip:
            out[k] = v
            continue
        if k not in defaults:
            raise ConfigError(f"unknown key {k!r}", path, f"{prefix}.{k}")
        out[k] = _coerce(v, defaults[k], path, f"{prefix}.{k}")
    return out


def parse_config(data: Any, path: str | None = None) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", path)
    _check_keys(data, {"name", "env", "model", "agent", "planner", "seeds", "out"}, path, "")
    data = copy.deepcopy(data)

    env = data.get("env")
    if not isinstance(env, dict) or env.get("kind") not in ENV_KINDS:
        raise ConfigError(f"env.kind must be one of {ENV_KINDS}", path, "env.kind")
    env = _typed(env, _ENV_DEFAULTS[env["kind"]], path, "env")

    model = data.get("model")
    if model is not None:
        if not isinstance(model, dict) or model.get("kind") not in MODEL_KINDS:
            raise ConfigError(f"model.kind must be one of {tuple(MODEL_KINDS)}", path, "model.kind")
        cls = MODEL_KINDS[model["kind"]]
        model = _typed(model, _signature_defaults(DynamicsModel.__init__, *[c.__init__ for c in cls.__mro__
                                                                            if issubclass(c, DynamicsModel)]),
                       path, "model")

    agent = data.get("agent", {"kind": "random"})
    if not isinstance(agent, dict) or agent.get("kind") not in AGENT_KINDS:
        raise ConfigError(f"agent.kind must be one of {AGENT_KINDS}", path, "agent.kind")
    cfg_cls = {"ppo": PpoConfig, "sac": SacConfig}.get(agent["kind"])
    if cfg_cls is not None:
        agent = _typed(agent, _dataclass_defaults(cfg_cls), path, "agent")
    else:
        _check_keys({k: v for k, v in agent.items() if k != "kind"}, (), path, "agent")

    planner_raw = data.get("planner", {}) or {}
    if not isinstance(planner_raw, dict):
        raise ConfigError("planner must be a mapping", path, "planner")
    bonus_raw = planner_raw.get("bonus", {}) or {}
    if not isinstance(bonus_raw, dict):
        raise ConfigError("bonus must be a mapping", path, "planner.bonus")
    planner_raw = _typed(planner_raw, _dataclass_defaults(PlannerConfig), path, "planner", skip=("bonus",))
    planner_raw.pop("bonus", None)
    bonus_raw = _typed(bonus_raw, _dataclass_defaults(BonusSpec), path, "planner.bonus", skip=())
    try:
        bonus = BonusSpec(**bonus_raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), path, "planner.bonus") from None
    try:
        planner = PlannerConfig(bonus=bonus, **planner_raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), path, "planner") from None
    if planner.planning and model is None:
        raise ConfigError(f"mode {planner.mode} needs a model", path, "model")
    if planner.planning and agent["kind"] == "random":
        raise ConfigError("planning modes need a learning agent", path, "agent.kind")
    if agent["kind"] == "sac" and env["kind"] != "maze":
        raise ConfigError("sac needs a continuous-action environment", path, "agent.kind")

    seeds = data.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers", path, "seeds")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct", path, "seeds")

    name = str(data.get("name") or (Path(path).stem if path else "experiment"))
    return ExperimentConfig(name=name, env=env, model=model, agent=agent, planner=planner, seeds=seeds,
                            out=data.get("out"), source=path, raw=data)


def load_config(path: str | Path) -> ExperimentConfig:
    path = str(path)
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", path) from None
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML: {e}", path) from None
    return parse_config(data, path)


def set_dotted(data: dict, key: str, value) -> dict:
    """Copy of ``data`` with ``a.b.c`` set to ``value``."""
    out = copy.deepcopy(data)
    node = out
    parts = key.split(".")
    for p in parts[:-1]:
        if node.get(p) is None:
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value
    return out
