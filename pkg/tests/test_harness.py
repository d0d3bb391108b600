import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from ptsbe.agents import PpoAgent, SacAgent
from ptsbe.checkpoint import load_checkpoint, save_checkpoint
from ptsbe.cli import main
from ptsbe.config import ConfigError, load_config, parse_config, set_dotted
from ptsbe.envs import Continuous, Discrete, MountainCarEnv, UnichainEnv
from ptsbe.metrics import aggregate, coverage, pad, series
from ptsbe.numerics import Rng
from ptsbe.planner import RunTrace
from ptsbe.runner import read_trace_csv, run_experiment, run_seed

SMALL = {
    "name": "small",
    "env": {"kind": "unichain", "length": 8, "max_steps": 40},
    "model": {"kind": "de", "n_members": 3, "hidden": [8], "epochs": 1},
    "agent": {"kind": "ppo", "hidden": [8]},
    "planner": {"T": 40, "t_warm": 5, "t_policy": 10, "t_model": 10, "K": 2, "J": 4, "G": 1,
                "mode": "pts_be", "bonus": {"kind": "eig", "eta": 1.0}},
    "seeds": [0, 1, 2],
}


def _write(tmp_path, data, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return p


# -- config -------------------------------------------------------------------


def test_parse_fills_defaults_and_coerces_numbers():
    d = set_dotted(SMALL, "agent.lr", "3e-4")
    cfg = parse_config(d)
    assert cfg.agent["lr"] == pytest.approx(3e-4) and cfg.agent["hidden"] == (8,)
    res = cfg.resolved()
    assert res["agent"]["gamma"] == 0.99 and res["planner"]["bonus"]["jsd_samples"] == 32


@pytest.mark.parametrize("key,value,field", [
    ("env.kind", "cartpole", "env.kind"),
    ("env.lenght", 5, "env.lenght"),
    ("model.kind", "bnn", "model.kind"),
    ("agent.lr", "fast", "agent.lr"),
    ("planner.t_model", {"kind": "dk"}, "planner.t_model"),
    ("planner.K", 2.5, "planner.K"),
    ("planner.mode", "greedy", "planner"),
    ("planner.bonus.kind", "curiosity", "planner.bonus"),
    ("planner.stop_on_solve", "yes", "planner.stop_on_solve"),
    ("seeds", [1, 1], "seeds"),
    ("seeds", [], "seeds"),
    ("model", None, "model"),
])
def test_config_errors_name_the_field(key, value, field):
    with pytest.raises(ConfigError) as e:
        parse_config(set_dotted(SMALL, key, value), "x.yaml")
    assert e.value.field_name == field and "x.yaml" in str(e.value)


def test_sac_needs_continuous_env_and_planning_needs_learner():
    with pytest.raises(ConfigError):
        parse_config(set_dotted(SMALL, "agent", {"kind": "sac"}))
    with pytest.raises(ConfigError):
        parse_config(set_dotted(SMALL, "agent", {"kind": "random"}))


def test_load_config_reports_unreadable_and_bad_yaml(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    p = tmp_path / "bad.yaml"
    p.write_text("env: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_shipped_configs_validate():
    import pathlib
    root = pathlib.Path(__file__).resolve().parents[1] / "configs"
    files = sorted(root.glob("*.yaml"))
    assert files
    for f in files:
        assert main(["validate", str(f)]) == 0


# -- CLI and outputs ----------------------------------------------------------


def test_cli_run_writes_traces_aggregate_and_is_reproducible(tmp_path):
    cfg = _write(tmp_path, SMALL)
    assert main(["run", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["run", str(cfg), "--out", str(tmp_path / "b")]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    traces = sorted(p.name for p in a.glob("trace_seed*.csv"))
    assert traces == ["trace_seed0.csv", "trace_seed1.csv", "trace_seed2.csv"]
    for t in traces:
        assert (a / t).read_bytes() == (b / t).read_bytes()
    header = (a / "trace_seed0.csv").read_text().splitlines()[0]
    assert header == "step,state_0,action_0,r_ext,bonus,done,coverage"
    assert (a / "aggregate.csv").read_text().splitlines()[0] == "step,metric,median,q25,q75"
    assert yaml.safe_load((a / "config.resolved.yaml").read_text())["coverage_grid"]["cells"] == 8
    # report re-aggregates to the identical file
    before = (a / "aggregate.csv").read_bytes()
    (a / "aggregate.csv").unlink()
    assert main(["report", str(a)]) == 0
    assert (a / "aggregate.csv").read_bytes() == before


def test_seed_offset_and_permutation_independence(tmp_path):
    cfg = _write(tmp_path, SMALL)
    main(["run", str(cfg), "--out", str(tmp_path / "a")])
    main(["run", str(_write(tmp_path, set_dotted(SMALL, "seeds", [2, 0]), "p.yaml")), "--out", str(tmp_path / "p")])
    main(["run", str(_write(tmp_path, set_dotted(SMALL, "seeds", [1]), "o.yaml")), "--out", str(tmp_path / "o"),
          "--seed-offset", "1"])
    for s in (0, 2):
        assert (tmp_path / "a" / f"trace_seed{s}.csv").read_bytes() == (tmp_path / "p" / f"trace_seed{s}.csv").read_bytes()
    assert (tmp_path / "a" / "trace_seed2.csv").read_bytes() == (tmp_path / "o" / "trace_seed2.csv").read_bytes()


def test_parallel_jobs_match_serial(tmp_path):
    cfg = load_config(_write(tmp_path, SMALL))
    run_experiment(cfg, tmp_path / "s", jobs=1)
    run_experiment(cfg, tmp_path / "j", jobs=2)
    for s in SMALL["seeds"]:
        assert (tmp_path / "s" / f"trace_seed{s}.csv").read_bytes() == (tmp_path / "j" / f"trace_seed{s}.csv").read_bytes()


def test_sweep_creates_one_directory_per_value(tmp_path):
    cfg = _write(tmp_path, set_dotted(SMALL, "seeds", [0]))
    assert main(["sweep", str(cfg), "--vary", "planner.bonus.eta=0,2", "--out", str(tmp_path / "sw")]) == 0
    assert (tmp_path / "sw" / "planner.bonus.eta=0" / "trace_seed0.csv").exists()
    assert (tmp_path / "sw" / "planner.bonus.eta=2" / "summary.json").exists()


def test_exit_codes(tmp_path, capsys):
    bad = _write(tmp_path, set_dotted(SMALL, "planner.K", "many"), "bad.yaml")
    assert main(["validate", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "bad.yaml" in err and "planner.K" in err
    assert main(["report", str(tmp_path / "nowhere")]) == 2
    # a config that parses but fails while running
    boom = _write(tmp_path, set_dotted(SMALL, "env.length", 1), "boom.yaml")
    assert main(["run", str(boom), "--out", str(tmp_path / "x")]) == 3
    assert main(["run", str(_write(tmp_path, SMALL)), "--jobs", "0"]) == 2


def test_module_entry_point(tmp_path):
    cfg = _write(tmp_path, SMALL)
    r = subprocess.run([sys.executable, "-m", "ptsbe", "validate", str(cfg)], capture_output=True, text=True)
    assert r.returncode == 0 and "ok" in r.stdout


def test_default_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("PTSBE_OUT", str(tmp_path / "root"))
    cfg = _write(tmp_path, set_dotted(SMALL, "seeds", [0]))
    assert main(["run", str(cfg)]) == 0
    assert (tmp_path / "root" / "small" / "trace_seed0.csv").exists()


def test_summary_records_solve_steps(tmp_path):
    cfg = _write(tmp_path, set_dotted(SMALL, "seeds", [0]))
    main(["run", str(cfg), "--out", str(tmp_path / "a")])
    s = json.loads((tmp_path / "a" / "summary.json").read_text())
    tr = read_trace_csv(tmp_path / "a" / "trace_seed0.csv")
    hit = np.flatnonzero(tr["r_ext"] >= 1.0)
    assert s["solve_steps"] == [int(hit[0]) + 1 if len(hit) else None]
    assert s["n_runs"] == 1 and "coverage" in s["terminal"]


# -- metrics ------------------------------------------------------------------


def _trace(cells, initial=0, r=None):
    n = len(cells)
    return RunTrace(np.zeros((n, 1)), np.zeros((n, 1)), np.zeros(n) if r is None else np.asarray(r, float),
                    np.zeros(n), np.zeros(n, bool), np.asarray(cells), initial)


def test_coverage_fraction_and_monotone():
    env = UnichainEnv(50)
    full = coverage(_trace(list(range(50)), initial=0), env)
    assert full[-1] == 1.0 and np.all(np.diff(full) >= 0)
    still = coverage(_trace([1] * 20, initial=1), env)
    assert np.all(still == 1 / 50)
    with pytest.raises(ValueError):
        coverage(_trace([]), env)


def test_random_policy_mountain_car_coverage_below_forty_percent():
    cfg = parse_config({"env": {"kind": "mountain_car"}, "agent": {"kind": "random"},
                        "planner": {"T": 1000, "mode": "vanilla"}, "seeds": [0]})
    for seed in range(3):
        trace, env = run_seed(cfg, seed)
        assert coverage(trace, env)[-1] < 0.40


def test_series_solve_step_and_goal_distance():
    env = UnichainEnv(5)
    s = series(_trace([1, 2, 3, 4, 4], 1, r=[0, 0, 0, 1, 1]), env)
    assert s.solve_step == 4 and s.cum_reward[-1] == 2.0 and s.min_goal_distance is None


def test_aggregate_median_bands_and_ci():
    runs = [np.array([0.2, 0.2]), np.array([0.4, 0.5]), np.array([0.6, 0.9])]
    agg = aggregate(runs)
    assert agg.median.tolist() == [0.4, 0.5]
    term = np.array([0.2, 0.5, 0.9])
    assert agg.terminal_mean == pytest.approx(term.mean())
    assert agg.terminal_ci == pytest.approx(1.96 * term.std(ddof=1) / np.sqrt(3))
    one = aggregate([np.array([0.1, 0.3])])
    assert np.array_equal(one.median, one.q25) and np.array_equal(one.q25, one.q75) and one.terminal_ci == 0.0
    assert pad([np.array([1.0]), np.array([1.0, 2.0, 3.0])]).tolist() == [[1, 1, 1], [1, 2, 3]]


# -- checkpoints --------------------------------------------------------------


@pytest.mark.parametrize("kind", ["ppo", "sac"])
def test_policy_checkpoint_roundtrip(kind, tmp_path):
    if kind == "ppo":
        a, b = PpoAgent(2, Discrete(3), seed=0), PpoAgent(2, Discrete(3), seed=1)
    else:
        spec = Continuous([-1, -1], [1, 1])
        a, b = SacAgent(4, spec, seed=0), SacAgent(4, spec, seed=1)
    save_checkpoint(tmp_path / "p.npz", a.state_dict())
    b.load_state_dict(load_checkpoint(tmp_path / "p.npz"))
    s = Rng(0).normal(size=(5, a.state_dim))
    assert np.array_equal(a.act(s, Rng(1))[0], b.act(s, Rng(1))[0])


def test_checkpoint_rejects_unknown_objects(tmp_path):
    with pytest.raises(TypeError):
        save_checkpoint(tmp_path / "x.npz", {"f": object()})
    save_checkpoint(tmp_path / "y.npz", {"a": [np.ones(2), {"b": 3, "c": None}], "s": "txt"})
    back = load_checkpoint(tmp_path / "y.npz")
    assert np.array_equal(back["a"][0], np.ones(2)) and back["a"][1] == {"b": 3, "c": None} and back["s"] == "txt"


def test_mountain_car_env_config_passes_noise_options():
    cfg = parse_config({"env": {"kind": "mountain_car", "noise": "heteroskedastic", "sigma": "0.01"},
                        "agent": {"kind": "random"}, "planner": {"T": 5, "t_warm": 1, "mode": "vanilla"}})
    trace, env = run_seed(cfg, 0)
    assert isinstance(env, MountainCarEnv) and env.noise.sigma == 0.01
