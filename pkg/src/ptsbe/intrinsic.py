"""Intrinsic rewards computed from a dynamics model's posterior predictive.

All bonus functions accept a batched predictive (leading axis ``N`` over
queried ``(s, a)`` pairs) and return one value per row. The output layout
is ``(reward, next_state...)``; bonuses that are defined over next states
only (prediction error, variance) skip column 0, and the entropy-type
bonuses cover the full vector unless ``include_reward`` is switched off.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .dynamics import DynamicsModel, GpModel, Mixture, PosteriorPredictive, Single
from .envs import ActionSpec, Continuous, Discrete
from .numerics import LOG_2PI, GaussianDiag, Rng, cholesky, gaussian_entropy, log_det_chol

BONUS_KINDS = ("pred_error", "variance", "count", "entropy", "eig")


class ModelKindMismatch(TypeError):
    pass


@dataclass(frozen=True)
class BonusSpec:
    kind: str = "eig"
    eta: float = 1.0
    decay: str = "constant"            # "constant" or "linear"
    t_end: int | None = None           # horizon of the linear schedule
    jsd_samples: int = 32
    state_bins: int = 16
    action_bins: int = 8
    include_reward: bool = True
    epistemic_only: bool = True        # variance bonus: disagreement term only

    def __post_init__(self):
        if self.kind not in BONUS_KINDS:
            raise ValueError(f"unknown bonus kind {self.kind!r}; expected one of {BONUS_KINDS}")
        if not self.eta >= 0:
            raise ValueError("eta must be non-negative")
        if self.decay not in ("constant", "linear"):
            raise ValueError(f"unknown decay {self.decay!r}")
        if self.decay == "linear" and (self.t_end is None or self.t_end <= 0):
            raise ValueError("linear decay needs a positive t_end")
        if self.kind == "eig" and self.jsd_samples < 8:
            raise ValueError("jsd_samples must be at least 8")


def scale(bonus, t: int, spec: BonusSpec):
    """Apply the (possibly decaying) scaling factor ``η_t``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    eta = spec.eta
    if spec.decay == "linear":
        eta *= max(0.0, 1.0 - t / spec.t_end)
    return eta * np.asarray(bonus)


def _dims(pp: PosteriorPredictive, include_reward: bool) -> PosteriorPredictive:
    return pp if include_reward else pp.select(slice(1, None))


# ---------------------------------------------------------------------------
# Retrospective / heuristic bonuses
# ---------------------------------------------------------------------------


def pred_error_bonus(pp: PosteriorPredictive, next_state, eta: float = 1.0) -> np.ndarray:
    """``(η/2)·‖E[s'] - s'‖₂``; ensembles use the mixture mean."""
    mean = pp.mean[..., 1:]
    return 0.5 * eta * np.linalg.norm(mean - np.asarray(next_state, dtype=np.float64), axis=-1)


def variance_bonus(pp: PosteriorPredictive, epistemic_only: bool = True) -> np.ndarray:
    """Spread of the predicted next state around its expectation.

    For a GP this is the latent (epistemic) variance summed over state
    dimensions. For an ensemble it is the law-of-total-variance sum
    ``mean_m var_m + Var_m mean_m``, or only the disagreement term when
    ``epistemic_only`` is set.
    """
    pp = pp.select(slice(1, None))
    if isinstance(pp, Single):
        return pp.epistemic_var.sum(-1)
    disagreement = pp.means.var(axis=0)
    if epistemic_only:
        return disagreement.sum(-1)
    return (pp.vars.mean(axis=0) + disagreement).sum(-1)


class VisitCounter:
    """Visit counts over a fixed discretisation of ``(s, a)``.

    State dimensions are split into ``state_bins`` equal cells over
    ``[low, high]``; discrete actions are used as-is and continuous
    actions are binned at ``action_bins`` per dimension.
    """

    def __init__(self, low, high, action_spec: ActionSpec, state_bins: int = 16, action_bins: int = 8):
        self.low = np.asarray(low, dtype=np.float64)
        self.high = np.asarray(high, dtype=np.float64)
        self.action_spec = action_spec
        self.state_bins = state_bins
        self.action_bins = action_bins
        self.counts: dict[tuple, int] = {}

    def cell(self, s, a) -> tuple:
        s = np.asarray(s, dtype=np.float64)
        frac = (s - self.low) / (self.high - self.low)
        si = np.clip((frac * self.state_bins).astype(int), 0, self.state_bins - 1)
        if isinstance(self.action_spec, Discrete):
            ai = (int(np.asarray(a).reshape(-1)[0]),)
        else:
            spec = self.action_spec
            af = (np.asarray(a, dtype=np.float64) - spec.low) / (spec.high - spec.low)
            ai = tuple(np.clip((af * self.action_bins).astype(int), 0, self.action_bins - 1).tolist())
        return tuple(si.tolist()) + ai

    def record(self, s, a) -> None:
        c = self.cell(s, a)
        self.counts[c] = self.counts.get(c, 0) + 1

    def count(self, s, a) -> int:
        return self.counts.get(self.cell(s, a), 0)


def count_bonus(counter: VisitCounter, s, a, eta: float = 1.0) -> np.ndarray:
    """``η / max(1, N(s, a))`` per row; querying never changes the counts."""
    s = np.atleast_2d(s)
    a = np.asarray(a).reshape(len(s), -1)
    return np.array([eta / max(1, counter.count(si, ai)) for si, ai in zip(s, a)])


# ---------------------------------------------------------------------------
# Entropy and expected information gain
# ---------------------------------------------------------------------------


def mixture_entropy_mc(pp: Mixture, rng: Rng | None = None, samples: int = 32) -> np.ndarray:
    """Monte Carlo entropy of a uniform Gaussian mixture, per batch row.

    Draws ``samples`` points from every member and averages the negative
    mixture log-density over all ``M * samples`` draws.
    """
    rng = rng if rng is not None else Rng(0).child("mixture-entropy")
    mu, var = pp.means, pp.vars                        # (M, N, D)
    m = mu.shape[0]
    x = mu[:, None] + np.sqrt(var)[:, None] * rng.standard_normal((m, samples) + mu.shape[1:])
    # log N(x_{m,s} ; member k) for every k -> (K, M, S, N)
    diff = x[None] - mu[:, None, None]
    logp = -0.5 * np.sum(LOG_2PI + np.log(var)[:, None, None] + diff**2 / var[:, None, None], axis=-1)
    log_mix = logsumexp(logp, axis=0) - np.log(m)
    return -log_mix.mean(axis=(0, 1))


def entropy_bonus(pp: PosteriorPredictive, rng: Rng | None = None, samples: int = 32,
                  include_reward: bool = True) -> np.ndarray:
    """Entropy of the full predictive (epistemic plus aleatoric)."""
    pp = _dims(pp, include_reward)
    if isinstance(pp, Single):
        return gaussian_entropy(pp.dist)
    return mixture_entropy_mc(pp, rng, samples)


def eig_gaussian(epistemic_var, noise_var) -> np.ndarray:
    """Closed-form EIG of a Gaussian predictive: ``½ Σ_d log(1 + σ²_epi/σ²_noise)``."""
    return 0.5 * np.sum(np.log1p(np.asarray(epistemic_var) / np.asarray(noise_var)), axis=-1)


def eig_jsd(pp: Mixture, rng: Rng | None = None, samples: int = 32) -> np.ndarray:
    """Jensen-Shannon disagreement ``H[mixture] - mean_m H[member_m]``, floored at 0.

    Estimated as ``mean_m E_{x~p_m}[log p_m(x) - log p_mix(x)]`` on the same
    draws used for the mixture entropy: the estimand is unchanged but the
    sampling noise of the two entropy terms cancels, so identical members
    give 0 up to rounding.
    """
    rng = rng if rng is not None else Rng(0).child("mixture-entropy")
    mu, var = pp.means, pp.vars
    m = mu.shape[0]
    x = mu[:, None] + np.sqrt(var)[:, None] * rng.standard_normal((m, samples) + mu.shape[1:])
    diff = x[None] - mu[:, None, None]
    logp = -0.5 * np.sum(LOG_2PI + np.log(var)[:, None, None] + diff**2 / var[:, None, None], axis=-1)
    log_mix = logsumexp(logp, axis=0) - np.log(m)                     # (M, S, N)
    own = logp[np.arange(m), np.arange(m)]                             # log p_m at its own draws
    return np.maximum((own - log_mix).mean(axis=(0, 1)), 0.0)


def eig_bonus(pp: PosteriorPredictive, rng: Rng | None = None, samples: int = 32,
              include_reward: bool = True) -> np.ndarray:
    """Expected information gain about the dynamics from observing ``(r, s')``."""
    pp = _dims(pp, include_reward)
    if isinstance(pp, Single):
        return eig_gaussian(pp.epistemic_var, pp.noise_var)
    return eig_jsd(pp, rng, samples)


def ig_probe(model_before: DynamicsModel, model_after: DynamicsModel, probe_s, probe_a) -> float:
    """Reduction in joint uncertainty over a probe set between two GP fits.

    Sums ``½[log det Σ_before - log det Σ_after]`` over output dimensions,
    where ``Σ`` is the full predictive covariance over the probe inputs.
    """
    for m in (model_before, model_after):
        if not isinstance(m, GpModel):
            raise ModelKindMismatch(f"ig_probe needs GP-family models, got {type(m).__name__}")
    before = model_before.predictive_cov(probe_s, probe_a)
    after = model_after.predictive_cov(probe_s, probe_a)
    total = 0.0
    for cb, ca in zip(before, after):
        total += 0.5 * (log_det_chol(cholesky(cb)) - log_det_chol(cholesky(ca)))
    return float(total)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


@dataclass
class BonusContext:
    """Everything a bonus may need beyond the predictive itself."""

    next_state: np.ndarray | None = None
    counter: VisitCounter | None = None
    s: np.ndarray | None = None
    a: np.ndarray | None = None
    rng: Rng | None = field(default=None)


def compute_bonus(spec: BonusSpec, pp: PosteriorPredictive | None, ctx: BonusContext) -> np.ndarray:
    """Unscaled bonus of kind ``spec.kind`` for every row of ``pp``."""
    if spec.kind == "count":
        if ctx.counter is None:
            raise ValueError("count bonus needs a VisitCounter")
        return count_bonus(ctx.counter, ctx.s, ctx.a)
    if pp is None:
        raise ValueError(f"{spec.kind} bonus needs a posterior predictive")
    if spec.kind == "pred_error":
        if ctx.next_state is None:
            raise ValueError("prediction-error bonus needs the observed next state")
        return pred_error_bonus(pp, ctx.next_state)
    if spec.kind == "variance":
        return variance_bonus(pp, spec.epistemic_only)
    if spec.kind == "entropy":
        return entropy_bonus(pp, ctx.rng, spec.jsd_samples, spec.include_reward)
    return eig_bonus(pp, ctx.rng, spec.jsd_samples, spec.include_reward)


__all__ = [
    "BONUS_KINDS", "BonusContext", "BonusSpec", "ModelKindMismatch", "VisitCounter", "compute_bonus",
    "count_bonus", "eig_bonus", "eig_gaussian", "eig_jsd", "entropy_bonus", "ig_probe",
    "mixture_entropy_mc", "pred_error_bonus", "scale", "variance_bonus",
]
