"""The interaction loop: planning on imagined rollouts with intrinsic rewards.

``run`` drives one agent in one environment for ``T`` steps in one of four
modes:

``pts_be``
    Every ``t_policy`` steps after warmup, roll the policy out ``K`` times for
    ``J`` steps inside the dynamics model from the current state, add the
    scaled bonus to the imagined rewards and update the policy on that data
    only. The model is refit on real data every ``t_model`` steps.
``pts_extrinsic_only``
    Same loop with the bonus scale forced to zero.
``be_retrospective``
    Model-free updates on real data whose rewards are augmented with a
    bonus computed after the fact.
``vanilla``
    Plain model-free agent. A model may still be supplied and refit on
    schedule, which is how bonus levels are monitored under a fixed policy.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .agents import RolloutBatch, SacAgent
from .buffer import TransitionBuffer
from .dynamics import DynamicsModel
from .envs import Discrete, Env
from .intrinsic import (
    BonusContext,
    BonusSpec,
    VisitCounter,
    compute_bonus,
    entropy_bonus,
    eig_bonus,
    pred_error_bonus,
    scale,
    variance_bonus,
)
from .numerics import Rng

MODES = ("pts_be", "be_retrospective", "pts_extrinsic_only", "vanilla")


class IncompatibleMode(ValueError):
    pass


@dataclass(frozen=True)
class PlannerConfig:
    T: int = 1000
    t_warm: int = 10
    t_policy: int = 64
    t_model: int = 64
    K: int = 10
    J: int = 100
    G: int = 10
    bonus: BonusSpec = field(default_factory=BonusSpec)
    mode: str = "pts_be"
    imagined_reward: str = "predicted"          # or "zero"
    monitor_bonuses: tuple[str, ...] = ()        # kinds averaged over new data at each refit
    monitor_after_fit: bool = False              # evaluate monitored kinds with the refit model
    stop_on_solve: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.T < 1 or not 0 <= self.t_warm < self.T:
            raise ValueError("need T >= 1 and 0 <= t_warm < T")
        for name in ("t_policy", "t_model", "K", "J", "G"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.imagined_reward not in ("predicted", "zero"):
            raise ValueError("imagined_reward must be 'predicted' or 'zero'")

    @property
    def planning(self) -> bool:
        return self.mode in ("pts_be", "pts_extrinsic_only")

    @property
    def effective_bonus(self) -> BonusSpec:
        if self.mode in ("pts_extrinsic_only", "vanilla"):
            return replace(self.bonus, eta=0.0)
        return self.bonus


@dataclass
class RunTrace:
    states: np.ndarray                 # raw next state after each step, (T, ds)
    actions: np.ndarray                # (T, da)
    r_ext: np.ndarray
    bonus: np.ndarray                  # scaled bonus attributed to each real step
    done: np.ndarray
    cells: np.ndarray                  # coverage cell of the state after each step
    initial_cell: int
    updates: list[dict] = field(default_factory=list)          # one per model refit
    policy_updates: list[dict] = field(default_factory=list)
    solved_step: int | None = None
    status: str = "completed"

    def __len__(self) -> int:
        return len(self.r_ext)


def _predictive_bonus(spec: BonusSpec, model: DynamicsModel, s, a_enc, s2, counter, rng) -> np.ndarray:
    pp = None if spec.kind == "count" else model.predict(s, a_enc)
    ctx = BonusContext(next_state=s2, counter=counter, s=s, a=a_enc, rng=rng)
    return compute_bonus(spec, pp, ctx)


def rollout_imagined(s0, agent, model: DynamicsModel, env: Env, K: int, J: int, rng: Rng,
                     bonus: BonusSpec | None = None, counter: VisitCounter | None = None,
                     imagined_reward: str = "predicted") -> RolloutBatch:
    """``K`` policy rollouts of length ``J`` inside the model, all from ``s0``.

    Rows are trajectory-major (``k * J + j``). Rewards are the model's
    reward-head samples (or zeros); the raw bonus of every imagined step is
    stored on the batch for :func:`augment`.
    """
    s = np.repeat(np.asarray(s0, dtype=np.float64)[None], K, axis=0)
    states, actions, rewards, nexts, bonuses, logps = [], [], [], [], [], []
    act_rng, dyn_rng, bonus_rng = rng.child("act"), rng.child("dynamics"), rng.child("bonus")
    for _ in range(J):
        a, logp = agent.act(s, act_rng)
        a_enc = env.encode_action(a)
        pp = model.predict(s, a_enc)
        r, s2 = model.sample_from(pp, dyn_rng)
        if bonus is not None and bonus.kind != "pred_error":
            ctx = BonusContext(counter=counter, s=s, a=a_enc, rng=bonus_rng)
            bonuses.append(compute_bonus(bonus, None if bonus.kind == "count" else pp, ctx))
        else:
            bonuses.append(np.zeros(K))
        states.append(s)
        actions.append(np.asarray(a))
        rewards.append(r if imagined_reward == "predicted" else np.zeros(K))
        nexts.append(s2)
        logps.append(logp)
        s = s2

    def flat(xs):
        arr = np.stack(xs, axis=1)          # (K, J, ...)
        return arr.reshape((K * J,) + arr.shape[2:])

    ends = np.zeros((K, J), dtype=bool)
    ends[:, -1] = True
    r = flat(rewards)
    return RolloutBatch(
        states=flat(states), actions=flat(actions), rewards=r.copy(), next_states=flat(nexts),
        dones=np.zeros(K * J, dtype=bool), ends=ends.reshape(-1), log_probs=flat(logps),
        source="model", extrinsic=r, bonus=flat(bonuses),
    )


def augment(batch: RolloutBatch, bonus_fn, spec: BonusSpec, t: int) -> RolloutBatch:
    """Replace rewards by ``r_ext + η_t · bonus``; the extrinsic part is kept on the batch."""
    extrinsic = batch.extrinsic if batch.extrinsic is not None else np.asarray(batch.rewards, dtype=np.float64)
    b = np.asarray(bonus_fn(batch), dtype=np.float64) if bonus_fn is not None else batch.bonus
    if b is None:
        b = np.zeros(len(batch))
    return replace(batch, rewards=extrinsic + scale(b, t, spec), extrinsic=extrinsic, bonus=b)


def _monitor(kinds, spec: BonusSpec, model: DynamicsModel, s, a_enc, s2, rng: Rng) -> dict:
    """Mean of several bonus kinds over a block of real transitions (pre-refit model)."""
    out = {}
    pp = model.predict(s, a_enc)
    for kind in kinds:
        if kind == "eig":
            v = eig_bonus(pp, rng, spec.jsd_samples, spec.include_reward)
        elif kind == "entropy":
            v = entropy_bonus(pp, rng, spec.jsd_samples, spec.include_reward)
        elif kind == "pred_error":
            v = pred_error_bonus(pp, s2)
        elif kind == "variance":
            v = variance_bonus(pp, spec.epistemic_only)
        else:
            raise ValueError(f"cannot monitor bonus kind {kind!r}")
        out[kind] = float(np.mean(v))
    return out


def run(env: Env, model: DynamicsModel | None, agent, config: PlannerConfig, rng: Rng) -> RunTrace:
    """Execute one run and return its trace."""
    spec = config.effective_bonus
    needs_model = config.planning or (config.mode == "be_retrospective" and spec.kind != "count")
    if needs_model and model is None:
        raise IncompatibleMode(f"mode {config.mode} needs a dynamics model")
    if config.planning and spec.kind == "pred_error" and spec.eta > 0:
        raise IncompatibleMode("prediction-error bonus needs observed next states; use be_retrospective")
    if config.monitor_bonuses and model is None:
        raise IncompatibleMode("monitoring bonuses needs a dynamics model")

    env_rng, act_rng, fit_rng = rng.child("env"), rng.child("act"), rng.child("fit")
    plan_rng, learn_rng, bonus_rng = rng.child("plan"), rng.child("learn"), rng.child("bonus")
    is_sac = isinstance(agent, SacAgent)
    counter = None
    if spec.kind == "count":
        counter = VisitCounter(env.obs_low, env.obs_high, env.action_spec, spec.state_bins, spec.action_bins)

    T = config.T
    da = 1 if isinstance(env.action_spec, Discrete) else env.action_spec.dim
    tr_states = np.zeros((T, env.state_dim))
    tr_actions = np.zeros((T, da))
    tr_r = np.zeros(T)
    tr_bonus = np.zeros(T)
    tr_done = np.zeros(T, dtype=bool)
    tr_cells = np.zeros(T, dtype=np.int64)

    buffer = TransitionBuffer()
    onpolicy: list[tuple] = []          # (s, a, logp, r, s2, done, end) since last policy update
    raw = env.reset(env_rng)
    initial_cell = env.coverage_cell(raw)
    ep_steps = 0
    last_fit = 0                         # buffer index of the previous refit
    updates, policy_updates = [], []
    solved = None
    n = 0

    for t in range(1, T + 1):
        s = env.encode_state(raw)
        a, logp = agent.act(s, act_rng)
        res = env.step(a, env_rng)
        ep_steps += 1
        s2 = env.encode_state(res.next_state)
        a_enc = env.encode_action(a)
        buffer.add_batch(s[None], np.atleast_1d(np.asarray(a, dtype=np.float64))[None], a_enc[None],
                         np.array([res.extrinsic_reward]), s2[None], np.array([res.done]))
        if counter is not None:
            counter.record(s, a_enc)
        truncated = ep_steps >= env.max_steps
        end = res.done or truncated

        i = t - 1
        tr_states[i] = res.next_state
        tr_actions[i] = np.asarray(a, dtype=np.float64).reshape(-1)
        tr_r[i] = res.extrinsic_reward
        tr_done[i] = res.done
        tr_cells[i] = env.coverage_cell(res.next_state)
        n = t
        if solved is None and res.extrinsic_reward >= 1.0:
            solved = t

        step_bonus = 0.0
        if spec.eta > 0 and (counter is not None or (model is not None and model.fitted)):
            b = _predictive_bonus(spec, model, s[None], a_enc[None], s2[None], counter, bonus_rng)
            step_bonus = float(scale(b, t, spec)[0])
        tr_bonus[i] = step_bonus

        if not config.planning:
            if is_sac:
                r_aug = res.extrinsic_reward + (step_bonus if config.mode == "be_retrospective" else 0.0)
                batch = RolloutBatch(s[None], np.asarray(a)[None], np.array([r_aug]), s2[None],
                                     np.array([res.done]), np.array([end]), source="env")
                agent.learn(batch, 1 if t > config.t_warm else 0, learn_rng)
            else:
                onpolicy.append((s, a, logp, res.extrinsic_reward, s2, res.done, end))

        if end:
            raw = env.reset(env_rng)
            ep_steps = 0
        else:
            raw = res.next_state

        if solved is not None and config.stop_on_solve:
            break

        if t <= config.t_warm:
            continue

        # first model fit right after warmup so planning never meets an unfitted model
        if model is not None and not model.fitted:
            model.fit(buffer, fit_rng)
            last_fit = len(buffer)

        if t % config.t_policy == 0:
            if config.planning:
                batch = rollout_imagined(env.encode_state(raw), agent, model, env, config.K, config.J,
                                         plan_rng.child(t), spec if spec.eta > 0 else None, counter,
                                         config.imagined_reward)
                batch = augment(batch, None, spec, t)
                diag = agent.learn(batch, config.G, learn_rng)
                diag.update(step=t, mean_bonus=float(np.mean(batch.bonus)))
                policy_updates.append(diag)
            elif not is_sac and onpolicy:
                batch = _onpolicy_batch(onpolicy)
                if config.mode == "be_retrospective" and spec.eta > 0:
                    ae = env.encode_action(batch.actions)
                    bonus_fn = lambda b: _predictive_bonus(spec, model, b.states, ae, b.next_states, counter, bonus_rng)
                    batch = augment(batch, bonus_fn, spec, t)
                diag = agent.learn(batch, config.G, learn_rng)
                diag.update(step=t)
                policy_updates.append(diag)
                onpolicy = []

        if model is not None and t % config.t_model == 0:
            rec = {"step": t, "n_data": len(buffer)}
            blk = slice(last_fit, len(buffer))
            watch = bool(config.monitor_bonuses) and len(buffer) > last_fit
            if watch and not config.monitor_after_fit:
                rec.update(_monitor(config.monitor_bonuses, config.bonus, model, buffer.states[blk],
                                    buffer.actions_enc[blk], buffer.next_states[blk], bonus_rng.child(t)))
            model.fit(buffer, fit_rng)
            if watch and config.monitor_after_fit:
                rec.update(_monitor(config.monitor_bonuses, config.bonus, model, buffer.states[blk],
                                    buffer.actions_enc[blk], buffer.next_states[blk], bonus_rng.child(t)))
            last_fit = len(buffer)
            rec.update({f"fit_{k}": v for k, v in model.fit_info.items() if np.isscalar(v)})
            updates.append(rec)

    if config.planning and hasattr(agent, "sources_seen"):
        assert agent.sources_seen <= {"model"}, "real transitions leaked into a planning-mode policy update"

    return RunTrace(
        states=tr_states[:n], actions=tr_actions[:n], r_ext=tr_r[:n], bonus=tr_bonus[:n], done=tr_done[:n],
        cells=tr_cells[:n], initial_cell=initial_cell, updates=updates, policy_updates=policy_updates,
        solved_step=solved,
    )


def _onpolicy_batch(rows: list[tuple]) -> RolloutBatch:
    s, a, logp, r, s2, done, end = zip(*rows)
    ends = np.array(end, dtype=bool)
    ends[-1] = True
    return RolloutBatch(
        states=np.array(s), actions=np.array(a), rewards=np.array(r, dtype=np.float64), next_states=np.array(s2),
        dones=np.array(done, dtype=bool), ends=ends, log_probs=np.array(logp, dtype=np.float64), source="env",
        extrinsic=np.array(r, dtype=np.float64),
    )


__all__ = ["IncompatibleMode", "MODES", "PlannerConfig", "RunTrace", "augment", "rollout_imagined", "run"]
