import numpy as np
import pytest

from ptsbe.agents import PpoAgent, RandomAgent, RolloutBatch, SacAgent, SacConfig
from ptsbe.dynamics import DeepEnsembleModel, GpModel
from ptsbe.envs import MazeEnv, MountainCarEnv, UnichainEnv
from ptsbe.intrinsic import BonusSpec, eig_bonus
from ptsbe.numerics import Rng
from ptsbe.planner import IncompatibleMode, PlannerConfig, augment, rollout_imagined, run


def _uc_parts(model_kind="de", seed=0):
    env = UnichainEnv(10, max_steps=100)
    lo, hi = env.obs_low, env.obs_high
    if model_kind == "de":
        model = DeepEnsembleModel(1, 1, n_members=3, hidden=(16,), epochs=2, seed=seed, state_low=lo, state_high=hi)
    else:
        model = GpModel(1, 1, opt_steps=5, state_low=lo, state_high=hi)
    return env, model, PpoAgent(1, env.action_spec, seed=seed)


def _cfg(**kw):
    base = dict(T=60, t_warm=10, t_policy=16, t_model=16, K=3, J=5, G=2)
    return PlannerConfig(**(base | kw))


def test_config_validation():
    for kw in ({"mode": "greedy"}, {"T": 10, "t_warm": 10}, {"K": 0}, {"imagined_reward": "mean"}):
        with pytest.raises(ValueError):
            _cfg(**kw)


def test_planning_needs_a_model():
    env, _, agent = _uc_parts()
    with pytest.raises(IncompatibleMode):
        run(env, None, agent, _cfg(), Rng(0))
    with pytest.raises(IncompatibleMode):
        run(env, None, agent, _cfg(mode="vanilla", monitor_bonuses=("eig",)), Rng(0))


def test_pred_error_cannot_drive_planning():
    env, model, agent = _uc_parts()
    with pytest.raises(IncompatibleMode):
        run(env, model, agent, _cfg(bonus=BonusSpec("pred_error")), Rng(0))


def test_warmup_only_run_has_no_updates():
    env, model, agent = _uc_parts()
    tr = run(env, model, agent, _cfg(T=8, t_warm=7), Rng(0))
    assert len(tr) == 8 and not tr.updates and not tr.policy_updates
    assert np.all(tr.bonus == 0)


def test_zero_eta_equals_extrinsic_only():
    traces = []
    for mode, eta in (("pts_be", 0.0), ("pts_extrinsic_only", 1.0)):
        env, model, agent = _uc_parts()
        traces.append(run(env, model, agent, _cfg(mode=mode, bonus=BonusSpec("eig", eta=eta)), Rng(3)))
    a, b = traces
    assert np.array_equal(a.states, b.states) and np.array_equal(a.actions, b.actions)


def test_planning_policy_sees_only_model_data():
    env, model, agent = _uc_parts()
    tr = run(env, model, agent, _cfg(), Rng(0))
    assert agent.sources_seen == {"model"} and len(tr.policy_updates) == 3


def test_rollout_shapes_and_start_state():
    env, model, agent = _uc_parts()
    run(env, model, agent, _cfg(T=20), Rng(0))
    s0 = env.encode_state(np.array([4.0]))
    b = rollout_imagined(s0, agent, model, env, 1, 1, Rng(0))
    assert len(b) == 1 and np.array_equal(b.states[0], s0)
    b = rollout_imagined(s0, agent, model, env, 4, 7, Rng(0), BonusSpec("eig"))
    assert len(b) == 28 and b.source == "model" and np.all(b.bonus >= 0)
    assert np.all(b.states[::7] == s0) and b.ends.sum() == 4 and not b.dones.any()
    # trajectories are chained: next state of step j is the state of step j+1
    k = b.next_states.reshape(4, 7, 1)[:, :-1]
    assert np.array_equal(k, b.states.reshape(4, 7, 1)[:, 1:])


def test_deterministic_model_and_policy_give_identical_rollouts():
    env = MazeEnv("open")
    lo, hi = env.obs_low, env.obs_high

    class Frozen(GpModel):
        def sample_from(self, pp, rng):
            return pp.mean[:, 0], self.clip_state(pp.mean[:, 1:])

    class Greedy(RandomAgent):
        def act(self, s, rng, deterministic=False):
            s = np.asarray(s)
            return np.tile([0.5, -0.5], (len(s), 1)), np.zeros(len(s))

    model = Frozen(4, 2, opt_steps=0, state_low=lo, state_high=hi)
    rng = np.random.default_rng(0)
    s = rng.uniform(-1, 1, size=(30, 4))
    model.fit_arrays(model.inputs(s, rng.uniform(-1, 1, size=(30, 2))), rng.normal(size=(30, 5)) * 0.1, Rng(0))
    b = rollout_imagined(s[0], Greedy(4, env.action_spec), model, env, 5, 6, Rng(0))
    traj = b.states.reshape(5, 6, 4)
    assert np.allclose(traj, traj[0], rtol=0, atol=1e-12)     # rows agree up to BLAS rounding


def test_augment_identities():
    n = 1024
    z = np.zeros((n, 2))
    b = RolloutBatch(z, z, np.full(n, 0.25), z, np.zeros(n, bool), np.zeros(n, bool), bonus=np.arange(n) / n)
    same = augment(b, None, BonusSpec(eta=0.0), 5)
    assert np.array_equal(same.rewards, b.rewards)
    aug = augment(b, None, BonusSpec(eta=3.0), 5)
    assert np.allclose(aug.rewards, 0.25 + 3.0 * b.bonus) and np.array_equal(aug.extrinsic, b.rewards)
    zero = RolloutBatch(z, z, np.zeros(n), z, np.zeros(n, bool), np.zeros(n, bool))
    assert np.allclose(augment(zero, lambda _: np.full(n, 2.0), BonusSpec(eta=0.5), 0).rewards, 1.0)


def test_augmented_return_decomposes():
    rng = np.random.default_rng(0)
    n, gamma, eta = 50, 0.97, 0.7
    z = np.zeros((n, 1))
    b = RolloutBatch(z, z, rng.normal(size=n), z, np.zeros(n, bool), np.zeros(n, bool), bonus=rng.uniform(size=n))
    aug = augment(b, None, BonusSpec(eta=eta), 0)
    disc = gamma ** np.arange(n)
    assert disc @ aug.rewards == pytest.approx(disc @ b.rewards + eta * (disc @ b.bonus), abs=1e-12)


def test_trace_bookkeeping_and_stop_on_solve():
    env = MountainCarEnv("none")
    env_t = RandomAgent(2, env.action_spec)
    tr = run(env, None, env_t, PlannerConfig(T=300, mode="vanilla"), Rng(0))
    assert len(tr) == 300 and tr.solved_step is None and tr.states.shape == (300, 2)
    uc = UnichainEnv(5)

    class Right(RandomAgent):
        def act(self, s, rng, deterministic=False):
            return 2, 0.0

    tr = run(uc, None, Right(1, uc.action_spec), PlannerConfig(T=50, t_warm=1, mode="vanilla", stop_on_solve=True),
             Rng(0))
    assert tr.solved_step == 3 and len(tr) == 3


def test_monitor_records_every_refit():
    env = MountainCarEnv("homoskedastic", sigma=0.02)
    model = DeepEnsembleModel(2, 1, n_members=3, hidden=(16,), epochs=1, state_low=env.obs_low,
                              state_high=env.obs_high)
    cfg = PlannerConfig(T=200, t_warm=10, t_model=64, mode="vanilla", monitor_bonuses=("eig", "entropy", "pred_error"))
    tr = run(env, model, RandomAgent(2, env.action_spec), cfg, Rng(0))
    assert [u["step"] for u in tr.updates] == [64, 128, 192]
    assert all({"eig", "entropy", "pred_error", "n_data"} <= set(u) for u in tr.updates)


def test_be_retrospective_bonus_reaches_real_data():
    env, model, agent = _uc_parts()
    tr = run(env, model, agent, _cfg(mode="be_retrospective", bonus=BonusSpec("eig", eta=2.0)), Rng(0))
    assert agent.sources_seen == {"env"} and np.any(tr.bonus > 0)


def test_vanilla_sac_learns_online_and_count_bonus_needs_no_model():
    env = MazeEnv("open")
    agent = SacAgent(4, env.action_spec, SacConfig(hidden=(16,), batch_size=32), seed=0)
    cfg = PlannerConfig(T=80, t_warm=10, mode="be_retrospective", bonus=BonusSpec("count", eta=1.0))
    tr = run(env, None, agent, cfg, Rng(0))
    assert len(agent.replay) == 80 and np.all(tr.bonus > 0)


def test_run_is_deterministic():
    out = []
    for _ in range(2):
        env, model, agent = _uc_parts()
        out.append(run(env, model, agent, _cfg(), Rng(11)))
    assert np.array_equal(out[0].states, out[1].states) and np.array_equal(out[0].bonus, out[1].bonus)


def test_gp_bonus_decays_on_probe_set():
    """Stationary dynamics: the EIG on fixed probes is lower late in training than early."""
    env = UnichainEnv(10, max_steps=100)
    probes = env.encode_state(np.arange(10.0)[:, None])
    acts = env.encode_action(np.tile([0, 1, 2], 4)[:10])

    class ProbedGp(GpModel):
        def fit(self, buffer, rng):
            super().fit(buffer, rng)
            self.levels.append(eig_bonus(self.predict(probes, acts)).mean())
            return self

    for seed in range(3):
        model = ProbedGp(1, 1, opt_steps=5, state_low=env.obs_low, state_high=env.obs_high)
        model.levels = []
        run(env, model, PpoAgent(1, env.action_spec, seed=seed), _cfg(T=200, t_model=8, J=10),
            Rng(seed))
        q = len(model.levels) // 4
        assert np.mean(model.levels[-q:]) < np.mean(model.levels[:q])
