"""Policy learners: PPO (categorical or Gaussian), SAC (tanh-Gaussian) and a
uniform random baseline.

All learners share one small surface used by the planner:

* ``act(s, rng, deterministic=False) -> (action, log_prob)``, batched over
  leading rows of ``s``;
* ``learn(batch, epochs, rng) -> diagnostics`` on a :class:`RolloutBatch`.

Gradients are written out by hand on top of :mod:`ptsbe.numerics`; each
``*_loss_and_grads`` function is deterministic given its inputs so it can be
checked against finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .buffer import TransitionBuffer
from .envs import ActionSpec, Continuous, Discrete
from .numerics import LOG_2PI, Adam, Mlp, Rng, mlp_backward, mlp_forward


@dataclass
class RolloutBatch:
    """Flat batch of transitions, possibly several trajectories back to back.

    ``ends[t]`` marks the last step of a trajectory (terminal or truncated);
    ``dones[t]`` only marks true terminals, after which nothing is bootstrapped.
    ``source`` records provenance ("env" or "model").
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    ends: np.ndarray
    log_probs: np.ndarray | None = None
    values: np.ndarray | None = None
    next_values: np.ndarray | None = None
    source: str = "env"
    extrinsic: np.ndarray | None = None   # rewards before augmentation
    bonus: np.ndarray | None = None       # raw (unscaled) intrinsic bonus per step

    def __post_init__(self):
        n = len(self.rewards)
        for name in ("states", "actions", "next_states", "dones", "ends"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"RolloutBatch field {name} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self) -> int:
        return len(self.rewards)


def gae_advantages(batch: RolloutBatch, gamma: float = 0.99, lam: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates and the matching value targets."""
    if batch.values is None or batch.next_values is None:
        raise ValueError("GAE needs value estimates for states and next states")
    r = np.asarray(batch.rewards, dtype=np.float64)
    nonterminal = 1.0 - np.asarray(batch.dones, dtype=np.float64)
    delta = r + gamma * batch.next_values * nonterminal - batch.values
    carry = 1.0 - np.asarray(batch.ends, dtype=np.float64)
    adv = np.empty_like(delta)
    last = 0.0
    for t in range(len(r) - 1, -1, -1):
        last = delta[t] + gamma * lam * carry[t] * last
        adv[t] = last
    return adv, adv + batch.values


def _softmax(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return np.exp(logp), logp


class RandomAgent:
    """Uniform random actions; learning is a no-op."""

    kind = "random"

    def __init__(self, state_dim: int, action_spec: ActionSpec, **_):
        self.state_dim = state_dim
        self.action_spec = action_spec

    def act(self, s, rng: Rng, deterministic: bool = False):
        s = np.asarray(s, dtype=np.float64)
        batch = s.shape[:-1]
        spec = self.action_spec
        if isinstance(spec, Discrete):
            a = rng.integers(0, spec.n, size=batch)
            return (int(a) if not batch else a), np.full(batch, -math.log(spec.n))
        a = rng.uniform(spec.low, spec.high, size=batch + (spec.dim,))
        return a, np.full(batch, -float(np.sum(np.log(spec.high - spec.low))))

    def learn(self, batch: RolloutBatch, epochs: int, rng: Rng) -> dict:
        return {}

    def state_dict(self) -> dict:
        return {"kind": self.kind}


# ---------------------------------------------------------------------------
# PPO
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PpoConfig:
    lr: float = 3e-4
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    c1: float = 0.5
    c2: float = 0.01
    hidden: tuple[int, ...] = (64, 64)
    minibatch: int = 64
    max_grad_norm: float = 0.5
    init_log_std: float = -0.5


class PpoAgent:
    """Actor-critic with separate policy and value MLPs.

    Discrete action spaces use a categorical head over logits. Continuous
    spaces use a diagonal Gaussian with state-independent log-std; sampled
    actions are left unsquashed and the environment clips them.
    """

    kind = "ppo"

    def __init__(self, state_dim: int, action_spec: ActionSpec, config: PpoConfig = PpoConfig(), seed: int = 0):
        self.state_dim = state_dim
        self.action_spec = action_spec
        self.config = config
        self.discrete = isinstance(action_spec, Discrete)
        out = action_spec.n if self.discrete else action_spec.dim
        init = Rng(seed).child("ppo-init")
        self.actor = Mlp.init([state_dim, *config.hidden, out], init.child("actor"), "tanh", out_scale=0.01)
        self.critic = Mlp.init([state_dim, *config.hidden, 1], init.child("critic"), "tanh")
        self.log_std = np.full(0 if self.discrete else out, config.init_log_std)
        self.opt = Adam(self.params(), config.lr, config.max_grad_norm)
        self.sources_seen: set[str] = set()

    # -- parameters --------------------------------------------------------

    def params(self) -> list[np.ndarray]:
        return self.actor.params() + [self.log_std] + self.critic.params()

    def set_params(self, params) -> None:
        na = len(self.actor.params())
        self.actor.set_params(list(params[:na]))
        self.log_std = params[na]
        self.critic.set_params(list(params[na + 1:]))

    # -- policy ------------------------------------------------------------

    def value(self, s) -> np.ndarray:
        return self.critic(np.asarray(s, dtype=np.float64))[..., 0]

    def log_prob(self, s, a) -> np.ndarray:
        out = self.actor(np.asarray(s, dtype=np.float64))
        if self.discrete:
            _, logp = _softmax(out)
            a = np.asarray(a, dtype=int)
            return np.take_along_axis(logp, a[..., None], axis=-1)[..., 0]
        std = np.exp(self.log_std)
        z = (np.asarray(a) - out) / std
        return np.sum(-0.5 * z * z - self.log_std - 0.5 * LOG_2PI, axis=-1)

    def act(self, s, rng: Rng, deterministic: bool = False):
        s = np.asarray(s, dtype=np.float64)
        out = self.actor(s)
        if self.discrete:
            p, logp = _softmax(out)
            if deterministic:
                a = np.argmax(out, axis=-1)
            else:
                u = rng.uniform(size=p.shape[:-1] + (1,))
                a = np.minimum((np.cumsum(p, axis=-1) < u).sum(axis=-1), p.shape[-1] - 1)
            lp = np.take_along_axis(logp, np.asarray(a)[..., None], axis=-1)[..., 0]
            return (int(a) if s.ndim == 1 else a), lp
        std = np.exp(self.log_std)
        eps = np.zeros_like(out) if deterministic else rng.standard_normal(out.shape)
        a = out + std * eps
        lp = np.sum(-0.5 * eps * eps - self.log_std - 0.5 * LOG_2PI, axis=-1)
        return a, lp

    # -- loss --------------------------------------------------------------

    def loss_and_grads(self, states, actions, old_log_probs, advantages, returns):
        """Clipped-surrogate PPO loss ``-L_clip + c1·L_value - c2·H`` and its gradient."""
        c = self.config
        b = len(states)
        out, atape = mlp_forward(self.actor, states)
        if self.discrete:
            p, logp_all = _softmax(out)
            a = np.asarray(actions, dtype=int)
            logp = logp_all[np.arange(b), a]
            ent = -(p * logp_all).sum(-1)
        else:
            std = np.exp(self.log_std)
            z = (actions - out) / std
            logp = np.sum(-0.5 * z * z - self.log_std - 0.5 * LOG_2PI, axis=-1)
            ent = np.full(b, np.sum(self.log_std) + 0.5 * out.shape[-1] * (1.0 + LOG_2PI))
        ratio = np.exp(logp - old_log_probs)
        clipped = np.clip(ratio, 1.0 - c.clip, 1.0 + c.clip)
        surr = np.minimum(ratio * advantages, clipped * advantages)
        active = ratio * advantages <= clipped * advantages
        v, vtape = mlp_forward(self.critic, states)
        v = v[:, 0]
        vloss = np.mean((v - returns) ** 2)
        loss = -surr.mean() + c.c1 * vloss - c.c2 * ent.mean()

        g_logp = -(active * ratio * advantages) / b
        if self.discrete:
            onehot = np.zeros_like(out)
            onehot[np.arange(b), a] = 1.0
            g_out = g_logp[:, None] * (onehot - p)
            g_out -= (c.c2 / b) * (-p * (logp_all + ent[:, None]))
            g_logstd = self.log_std * 0.0
        else:
            g_out = g_logp[:, None] * z / std
            g_logstd = (g_logp[:, None] * (z * z - 1.0)).sum(0) - c.c2
        g_actor, _ = mlp_backward(self.actor, atape, g_out)
        g_critic, _ = mlp_backward(self.critic, vtape, (2.0 * c.c1 / b * (v - returns))[:, None])
        diag = {
            "policy_loss": float(-surr.mean()),
            "value_loss": float(vloss),
            "entropy": float(ent.mean()),
            "approx_kl": float(np.mean(old_log_probs - logp)),
            "clip_frac": float(np.mean(np.abs(ratio - 1.0) > c.clip)),
        }
        return float(loss), g_actor + [g_logstd] + g_critic, diag

    def learn(self, batch: RolloutBatch, epochs: int, rng: Rng) -> dict:
        self.sources_seen.add(batch.source)
        if batch.log_probs is None:
            batch.log_probs = self.log_prob(batch.states, batch.actions)
        batch.values = self.value(batch.states)
        batch.next_values = self.value(batch.next_states)
        adv, ret = gae_advantages(batch, self.config.gamma, self.config.lam)
        return ppo_update(self, batch, adv, ret, epochs, rng)

    def state_dict(self) -> dict:
        return {"kind": self.kind, "config": vars(self.config) | {"hidden": list(self.config.hidden)},
                "params": self.params()}

    def load_state_dict(self, d: dict) -> None:
        self.set_params([np.asarray(p) for p in d["params"]])


def ppo_update(agent: PpoAgent, batch: RolloutBatch, advantages, returns, epochs: int, rng: Rng) -> dict:
    """``epochs`` passes of minibatch Adam on the PPO loss; advantages are
    standardised once per update."""
    n = len(batch)
    adv = (advantages - advantages.mean()) / (advantages.std() + 1e-8)
    mb = min(agent.config.minibatch, n)
    params = agent.params()
    diags = []
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, mb):
            idx = perm[start:start + mb]
            loss, grads, diag = agent.loss_and_grads(
                batch.states[idx], batch.actions[idx], batch.log_probs[idx], adv[idx], returns[idx])
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise FloatingPointError(f"non-finite PPO loss or gradient (loss={loss})")
            params = agent.opt.step(params, grads)
            agent.set_params(params)
            diags.append(diag)
    return {k: float(np.mean([d[k] for d in diags])) for k in diags[0]} if diags else {}


# ---------------------------------------------------------------------------
# SAC
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SacConfig:
    lr: float = 3e-4
    gamma: float = 0.99
    tau: float = 0.005
    hidden: tuple[int, ...] = (64, 64)
    batch_size: int = 128
    replay_capacity: int = 100_000
    init_log_alpha: float = 0.0
    target_entropy: float | None = None     # defaults to -dim(A)
    log_std_range: tuple[float, float] = (-5.0, 2.0)
    max_updates_per_learn: int | None = None


_SQUASH_EPS = 1e-6


class SacAgent:
    """Soft actor-critic with one critic and a Polyak-averaged target critic.

    The actor outputs the mean and a bounded log-std of a Gaussian over
    ``u``; actions are ``tanh(u)`` rescaled to the action box. The critic
    sees actions in the normalised ``[-1, 1]`` box.
    """

    kind = "sac"

    def __init__(self, state_dim: int, action_spec: ActionSpec, config: SacConfig = SacConfig(), seed: int = 0):
        if not isinstance(action_spec, Continuous):
            raise ValueError("SAC needs a continuous action space")
        self.state_dim = state_dim
        self.action_spec = action_spec
        self.config = config
        da = action_spec.dim
        self.center = 0.5 * (action_spec.high + action_spec.low)
        self.half = 0.5 * (action_spec.high - action_spec.low)
        init = Rng(seed).child("sac-init")
        self.actor = Mlp.init([state_dim, *config.hidden, 2 * da], init.child("actor"), "relu", out_scale=0.1)
        self.critic = Mlp.init([state_dim + da, *config.hidden, 1], init.child("critic"), "relu")
        self.target = self.critic.copy()
        self.log_alpha = np.array(config.init_log_alpha, dtype=np.float64)
        self.target_entropy = -float(da) if config.target_entropy is None else config.target_entropy
        self.actor_opt = Adam(self.actor.params(), config.lr)
        self.critic_opt = Adam(self.critic.params(), config.lr)
        self.alpha_opt = Adam([self.log_alpha], config.lr)
        self.replay = TransitionBuffer(config.replay_capacity)
        self.sources_seen: set[str] = set()

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))

    # -- policy ------------------------------------------------------------

    def _heads(self, out):
        da = self.action_spec.dim
        lo, hi = self.config.log_std_range
        th = np.tanh(out[..., da:])
        log_std = lo + 0.5 * (hi - lo) * (th + 1.0)
        return out[..., :da], log_std, 0.5 * (hi - lo) * (1.0 - th * th)

    def _squashed(self, mu, log_std, eps):
        std = np.exp(log_std)
        u = mu + std * eps
        t = np.tanh(u)
        logp = np.sum(-0.5 * eps * eps - log_std - 0.5 * LOG_2PI
                      - np.log(1.0 - t * t + _SQUASH_EPS) - np.log(self.half), axis=-1)
        return u, t, logp

    def act(self, s, rng: Rng, deterministic: bool = False):
        s = np.asarray(s, dtype=np.float64)
        mu, log_std, _ = self._heads(self.actor(s))
        eps = np.zeros_like(mu) if deterministic else rng.standard_normal(mu.shape)
        _, t, logp = self._squashed(mu, log_std, eps)
        return self.center + self.half * t, logp

    def normalize_action(self, a) -> np.ndarray:
        return np.clip((np.asarray(a, dtype=np.float64) - self.center) / self.half, -1.0, 1.0)

    # -- losses ------------------------------------------------------------

    def q(self, net: Mlp, s, a_n) -> np.ndarray:
        return net(np.concatenate([s, a_n], axis=-1))[..., 0]

    def critic_target(self, rewards, next_states, dones, eps_next) -> np.ndarray:
        mu, log_std, _ = self._heads(self.actor(next_states))
        _, t, logp = self._squashed(mu, log_std, eps_next)
        q_next = self.q(self.target, next_states, t)
        return rewards + self.config.gamma * (1.0 - dones) * (q_next - self.alpha * logp)

    def critic_loss_and_grads(self, states, actions_n, targets):
        x = np.concatenate([states, actions_n], axis=-1)
        q, tape = mlp_forward(self.critic, x)
        q = q[:, 0]
        b = len(q)
        loss = float(np.mean((q - targets) ** 2))
        grads, _ = mlp_backward(self.critic, tape, (2.0 / b * (q - targets))[:, None])
        return loss, grads

    def actor_loss_and_grads(self, states, eps):
        """``mean(α·log π(ã|s) - Q(s, ã))`` with ``ã`` reparameterised by ``eps``.

        Returns the loss, actor gradients and the sampled log-probabilities.
        """
        b = len(states)
        ds = self.state_dim
        out, atape = mlp_forward(self.actor, states)
        mu, log_std, dlogstd_draw = self._heads(out)
        std = np.exp(log_std)
        u, t, logp = self._squashed(mu, log_std, eps)
        x = np.concatenate([states, t], axis=-1)
        q, ctape = mlp_forward(self.critic, x)
        alpha = self.alpha
        loss = float(np.mean(alpha * logp - q[:, 0]))
        _, g_in = mlp_backward(self.critic, ctape, np.full((b, 1), -1.0 / b))
        sech2 = 1.0 - t * t
        dlogp_du = 2.0 * t * sech2 / (sech2 + _SQUASH_EPS)
        g_u = (alpha / b) * dlogp_du + g_in[:, ds:] * sech2
        g_mu = g_u
        g_logstd = -(alpha / b) + g_u * std * eps
        g_out = np.concatenate([g_mu, g_logstd * dlogstd_draw], axis=-1)
        grads, _ = mlp_backward(self.actor, atape, g_out)
        return loss, grads, logp

    def alpha_loss_and_grad(self, logp) -> tuple[float, np.ndarray]:
        """``-mean(α(log π + H_target))``; gradient taken in ``log α``."""
        m = float(np.mean(logp + self.target_entropy))
        return -self.alpha * m, np.array(-self.alpha * m)

    # -- learning ----------------------------------------------------------

    def learn(self, batch: RolloutBatch, epochs: int, rng: Rng) -> dict:
        """Append the batch to replay, then run ``epochs * ceil(len/batch_size)`` updates."""
        self.sources_seen.add(batch.source)
        a_n = self.normalize_action(batch.actions)
        self.replay.add_batch(batch.states, a_n, a_n, batch.rewards, batch.next_states, batch.dones)
        if len(self.replay) < min(self.config.batch_size, 32):
            return {}
        steps = epochs * max(1, math.ceil(len(batch) / self.config.batch_size))
        if self.config.max_updates_per_learn is not None:
            steps = min(steps, self.config.max_updates_per_learn)
        diags = [sac_update(self, rng) for _ in range(steps)]
        if not diags:
            return {}
        return {k: float(np.mean([d[k] for d in diags])) for k in diags[0]}

    def state_dict(self) -> dict:
        return {"kind": self.kind, "actor": self.actor.params(), "critic": self.critic.params(),
                "target": self.target.params(), "log_alpha": self.log_alpha}

    def load_state_dict(self, d: dict) -> None:
        self.actor.set_params([np.asarray(p) for p in d["actor"]])
        self.critic.set_params([np.asarray(p) for p in d["critic"]])
        self.target.set_params([np.asarray(p) for p in d["target"]])
        self.log_alpha = np.asarray(d["log_alpha"], dtype=np.float64)


def sac_update(agent: SacAgent, rng: Rng, minibatch: dict | None = None) -> dict:
    """One critic, actor and temperature step, then a Polyak target update."""
    c = agent.config
    if minibatch is None:
        idx = agent.replay.sample_indices(rng, c.batch_size)
        mb = agent.replay.gather(idx)
    else:
        mb = minibatch
    s, a_n, r, s2, d = mb["s"], mb["a"], mb["r"], mb["s2"], mb["done"].astype(np.float64)
    da = agent.action_spec.dim
    y = agent.critic_target(r, s2, d, rng.standard_normal((len(r), da)))
    closs, cgrads = agent.critic_loss_and_grads(s, a_n, y)
    agent.critic.set_params(agent.critic_opt.step(agent.critic.params(), cgrads))

    aloss, agrads, logp = agent.actor_loss_and_grads(s, rng.standard_normal((len(r), da)))
    agent.actor.set_params(agent.actor_opt.step(agent.actor.params(), agrads))

    tloss, tgrad = agent.alpha_loss_and_grad(logp)
    (agent.log_alpha,) = agent.alpha_opt.step([agent.log_alpha], [tgrad])

    tau = c.tau
    agent.target.set_params([(1.0 - tau) * pt + tau * p for pt, p in zip(agent.target.params(), agent.critic.params())])
    if not (np.isfinite(closs) and np.isfinite(aloss)):
        raise FloatingPointError(f"non-finite SAC loss (critic={closs}, actor={aloss})")
    return {"critic_loss": closs, "actor_loss": aloss, "alpha": agent.alpha, "entropy": float(-logp.mean())}


AGENT_KINDS = {"ppo": PpoAgent, "sac": SacAgent, "random": RandomAgent}


def make_agent(kind: str, state_dim: int, action_spec: ActionSpec, seed: int = 0, **kw):
    if kind == "random":
        return RandomAgent(state_dim, action_spec)
    if kind == "ppo":
        return PpoAgent(state_dim, action_spec, PpoConfig(**kw), seed)
    if kind == "sac":
        return SacAgent(state_dim, action_spec, SacConfig(**kw), seed)
    raise ValueError(f"unknown agent kind {kind!r}")
