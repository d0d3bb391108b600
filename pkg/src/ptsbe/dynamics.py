"""Bayesian models of ``p(r, s' | s, a)``.

Three models sit behind one interface (:class:`DynamicsModel`):

* :class:`GpModel` -- exact GP regression with a squared-exponential kernel,
  one independent GP per output dimension, hyperparameters fitted by Adam on
  the log marginal likelihood.
* :class:`DeepKernelModel` -- the same GP heads on top of a learned MLP
  feature map, trained jointly on the summed marginal likelihood.
* :class:`DeepEnsembleModel` -- ``M`` probabilistic MLPs emitting a mean and
  log-variance per output, trained on the Gaussian NLL.

Output vectors are ordered ``(reward, next_state...)``. Internally the
state part is regressed as the increment ``s' - s`` on standardised targets;
``predict`` converts back to absolute next states in observation units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.linalg.lapack import dpotri

from .buffer import TransitionBuffer
from .numerics import (
    LOG_2PI,
    Adam,
    GaussianDiag,
    Mlp,
    NotPositiveDefinite,
    Rng,
    cholesky,
    log_det_chol,
    mlp_backward,
    mlp_forward,
)

_TINY = 1e-300


class NotFitted(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Posterior predictive containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Single:
    """Gaussian predictive (GP/DK). ``dist.var`` includes observation noise;
    ``epistemic_var`` is the latent-function part alone."""

    dist: GaussianDiag
    epistemic_var: np.ndarray

    @property
    def noise_var(self) -> np.ndarray:
        return np.maximum(self.dist.var - self.epistemic_var, _TINY)

    @property
    def mean(self) -> np.ndarray:
        return self.dist.mean

    @property
    def dim(self) -> int:
        return self.dist.dim

    def select(self, dims) -> "Single":
        return Single(self.dist.select(dims), self.epistemic_var[..., dims])


@dataclass(frozen=True)
class Mixture:
    """Uniform mixture of ``M`` diagonal Gaussians; arrays are ``(M, ..., D)``."""

    means: np.ndarray
    vars: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        vars_ = np.asarray(self.vars, dtype=np.float64)
        if means.shape != vars_.shape:
            raise ValueError("mixture means and variances differ in shape")
        if means.shape[0] < 2:
            raise ValueError("a mixture needs at least two members")
        if np.any(~(vars_ > 0)):
            raise ValueError("mixture variances must be positive")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "vars", vars_)

    @classmethod
    def of(cls, members: list[GaussianDiag]) -> "Mixture":
        return cls(np.stack([g.mean for g in members]), np.stack([g.var for g in members]))

    @property
    def n_members(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[-1]

    @property
    def mean(self) -> np.ndarray:
        return self.means.mean(axis=0)

    def member(self, m: int) -> GaussianDiag:
        return GaussianDiag(self.means[m], self.vars[m])

    def select(self, dims) -> "Mixture":
        return Mixture(self.means[..., dims], self.vars[..., dims])


PosteriorPredictive = Single | Mixture


# ---------------------------------------------------------------------------
# GP primitives
# ---------------------------------------------------------------------------


@dataclass
class GpHyper:
    log_lengthscale: float = 0.0
    log_signal_var: float = 0.0
    log_noise_var: float = float(np.log(0.01))

    @property
    def lengthscale(self) -> float:
        return float(np.exp(self.log_lengthscale))

    @property
    def signal_var(self) -> float:
        return float(np.exp(self.log_signal_var))

    @property
    def noise_var(self) -> float:
        return float(np.exp(self.log_noise_var))

    def as_array(self) -> np.ndarray:
        return np.array([self.log_lengthscale, self.log_signal_var, self.log_noise_var])

    @classmethod
    def from_array(cls, a) -> "GpHyper":
        return cls(float(a[0]), float(a[1]), float(a[2]))


# log-space box for each hyperparameter during optimisation
HYPER_BOUNDS = np.array([
    [np.log(0.02), np.log(50.0)],
    [np.log(1e-3), np.log(50.0)],
    [np.log(1e-6), np.log(4.0)],
])


def sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(-1)[:, None] + (b * b).sum(-1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def se_kernel(a: np.ndarray, b: np.ndarray, lengthscale: float, signal_var: float) -> np.ndarray:
    """``s² exp(-‖x - x'‖² / (2ℓ²))``."""
    return signal_var * np.exp(-0.5 * sq_dist(a, b) / lengthscale**2)


class GpPosterior:
    """Exact GP conditioned on ``(X, y)`` with cached Cholesky factor."""

    def __init__(self, x: np.ndarray, y: np.ndarray, hyper: GpHyper):
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        if self.x.ndim != 2 or len(self.x) == 0:
            raise ValueError("GP needs a non-empty 2-D input matrix")
        self.hyper = hyper
        k = se_kernel(self.x, self.x, hyper.lengthscale, hyper.signal_var)
        k[np.diag_indices_from(k)] += hyper.noise_var
        self.chol = cholesky(k)
        self.alpha = solve_triangular(self.chol.T, solve_triangular(self.chol, self.y, lower=True), lower=False)

    def predict(self, xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and latent (epistemic) variance at ``xs``."""
        ks = se_kernel(xs, self.x, self.hyper.lengthscale, self.hyper.signal_var)
        mean = ks @ self.alpha
        v = solve_triangular(self.chol, ks.T, lower=True)
        var = self.hyper.signal_var - (v * v).sum(0)
        return mean, np.maximum(var, 0.0)

    def latent_cov(self, xs: np.ndarray) -> np.ndarray:
        ks = se_kernel(xs, self.x, self.hyper.lengthscale, self.hyper.signal_var)
        v = solve_triangular(self.chol, ks.T, lower=True)
        return se_kernel(xs, xs, self.hyper.lengthscale, self.hyper.signal_var) - v.T @ v

    def log_marginal_likelihood(self) -> float:
        n = len(self.y)
        return float(-0.5 * self.y @ self.alpha - 0.5 * log_det_chol(self.chol) - 0.5 * n * LOG_2PI)


def gp_posterior(x, y, hyper: GpHyper, xs, include_noise: bool = True) -> GaussianDiag:
    """Zero-mean SE-kernel GP regression evaluated at the rows of ``xs``.

    The returned Gaussian runs over test points (its last axis). Variances
    are predictive (with noise) unless ``include_noise`` is False, in which
    case they are the latent-function variances floored at a tiny positive
    value.
    """
    post = GpPosterior(x, y, hyper)
    mean, var = post.predict(np.asarray(xs, dtype=np.float64))
    var = var + hyper.noise_var if include_noise else np.maximum(var, _TINY)
    return GaussianDiag(mean, var)


def _chol_inverse(l: np.ndarray) -> np.ndarray:
    """``(L Lᵀ)⁻¹`` from a lower Cholesky factor via LAPACK ``potri``."""
    inv, info = dpotri(l, lower=1)
    if info != 0:
        raise NotPositiveDefinite(f"potri failed with info={info}")
    return np.tril(inv) + np.tril(inv, -1).T


def lml_and_grad(x: np.ndarray, y: np.ndarray, h: np.ndarray, sqd: np.ndarray | None = None):
    """Log marginal likelihood and its gradient in ``(log ℓ, log s², log σ²)``.

    Also returns ``W ∘ K_signal`` (``W = ½(ααᵀ - K⁻¹)``), which the deep
    kernel needs to push gradients into the feature map.
    """
    if sqd is None:
        sqd = sq_dist(x, x)
    ell2 = np.exp(2.0 * h[0])
    sf2 = np.exp(h[1])
    sn2 = np.exp(h[2])
    ksig = sf2 * np.exp(-0.5 * sqd / ell2)
    k = ksig.copy()
    k[np.diag_indices_from(k)] += sn2
    l = cholesky(k)
    alpha = solve_triangular(l.T, solve_triangular(l, y, lower=True), lower=False)
    kinv = _chol_inverse(l)
    w = 0.5 * (np.outer(alpha, alpha) - kinv)
    lml = -0.5 * y @ alpha - np.sum(np.log(np.diag(l))) - 0.5 * len(y) * LOG_2PI
    a = w * ksig
    grad = np.array([
        np.sum(a * sqd) / ell2,
        np.sum(a),
        sn2 * np.trace(w),
    ])
    return float(lml), grad, a


# ---------------------------------------------------------------------------
# Common model plumbing
# ---------------------------------------------------------------------------


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, y: np.ndarray) -> "Normalizer":
        mean = y.mean(axis=0)
        std = y.std(axis=0)
        # constant columns keep unit scale, as scikit-learn's StandardScaler does
        std = np.where(std < 1e-8, 1.0, std)
        return cls(mean, std)

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))


class DynamicsModel:
    """Interface shared by all dynamics models.

    Subclasses implement ``_fit_normalized`` and ``_predict_normalized``;
    this base class handles target construction, standardisation and
    conversion back to ``(reward, next_state)`` in observation units.
    """

    kind = "base"

    def __init__(self, state_dim: int, action_dim: int, state_low=None, state_high=None,
                 normalize: bool = True, predict_delta: bool = True):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.out_dim = state_dim + 1
        self.in_dim = state_dim + action_dim
        self.state_low = None if state_low is None else np.asarray(state_low, dtype=np.float64)
        self.state_high = None if state_high is None else np.asarray(state_high, dtype=np.float64)
        self.normalize = normalize
        self.predict_delta = predict_delta
        self.norm = Normalizer.identity(self.out_dim)
        self.fitted = False
        self.n_fits = 0
        self.fit_info: dict = {}

    # -- data plumbing -----------------------------------------------------

    def inputs(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        a = np.asarray(a, dtype=np.float64).reshape(len(s), -1)
        return np.concatenate([s, a], axis=1)

    def targets(self, s, r, s2) -> np.ndarray:
        s = np.atleast_2d(s)
        delta = np.atleast_2d(s2) - s if self.predict_delta else np.atleast_2d(s2)
        return np.concatenate([np.asarray(r, dtype=np.float64).reshape(-1, 1), delta], axis=1)

    def fit(self, buffer: TransitionBuffer, rng: Rng) -> "DynamicsModel":
        if len(buffer) == 0:
            raise ValueError("cannot fit a dynamics model on an empty buffer")
        x = self.inputs(buffer.states, buffer.actions_enc)
        y = self.targets(buffer.states, buffer.rewards, buffer.next_states)
        self.fit_arrays(x, y, rng)
        return self

    def fit_arrays(self, x: np.ndarray, y: np.ndarray, rng: Rng) -> None:
        self.norm = Normalizer.fit(y) if self.normalize else Normalizer.identity(self.out_dim)
        self._fit_normalized(x, (y - self.norm.mean) / self.norm.std, rng.child(f"fit{self.n_fits}"))
        self.fitted = True
        self.n_fits += 1

    def _check(self):
        if not self.fitted:
            raise NotFitted(f"{self.kind} model has not been fitted")

    def _to_output(self, s: np.ndarray, mean: np.ndarray) -> np.ndarray:
        """Denormalise a mean array (..., N, D) and add back the current state."""
        out = mean * self.norm.std + self.norm.mean
        if self.predict_delta:
            out = out.copy()
            out[..., 1:] += s
        return out

    def predict(self, s, a) -> PosteriorPredictive:
        self._check()
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        return self._predict(s, self.inputs(s, a))

    def clip_state(self, s: np.ndarray) -> np.ndarray:
        if self.state_low is None:
            return s
        return np.clip(s, self.state_low, self.state_high)

    def sample_next(self, s, a, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``(reward, next_state)`` for each row of ``(s, a)``."""
        return self.sample_from(self.predict(s, a), rng)

    def sample_from(self, pp: PosteriorPredictive, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``(reward, next_state)`` from an already computed predictive."""
        if isinstance(pp, Mixture):
            n = pp.means.shape[1]
            m = rng.integers(0, pp.n_members, size=n)
            mean = pp.means[m, np.arange(n)]
            var = pp.vars[m, np.arange(n)]
        else:
            mean, var = pp.dist.mean, pp.dist.var
        y = mean + np.sqrt(var) * rng.standard_normal(mean.shape)
        return y[:, 0], self.clip_state(y[:, 1:])

    # -- checkpointing -----------------------------------------------------

    def _base_state(self) -> dict:
        return {
            "kind": self.kind,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "state_low": self.state_low,
            "state_high": self.state_high,
            "normalize": self.normalize,
            "predict_delta": self.predict_delta,
            "norm_mean": self.norm.mean,
            "norm_std": self.norm.std,
            "fitted": self.fitted,
            "n_fits": self.n_fits,
        }

    def _load_base(self, d: dict) -> None:
        self.norm = Normalizer(np.asarray(d["norm_mean"]), np.asarray(d["norm_std"]))
        self.fitted = bool(d["fitted"])
        self.n_fits = int(d["n_fits"])


# ---------------------------------------------------------------------------
# Exact GP
# ---------------------------------------------------------------------------


def _optimise_hyper(x, y, h0: np.ndarray, steps: int, lr: float) -> tuple[np.ndarray, list[float]]:
    """Adam ascent on the LML; returns the best hyperparameters seen and the trace."""
    sqd = sq_dist(x, x)
    h = h0.copy()
    opt = Adam([h], lr)
    best_h, best = h.copy(), -np.inf
    trace = []
    for _ in range(steps):
        lml, g, _ = lml_and_grad(x, y, h, sqd)
        trace.append(lml)
        if lml > best:
            best, best_h = lml, h.copy()
        (h,) = opt.step([h], [-g / len(y)])
        h = np.clip(h, HYPER_BOUNDS[:, 0], HYPER_BOUNDS[:, 1])
    if steps:
        lml, _, _ = lml_and_grad(x, y, h, sqd)
        trace.append(lml)
        if lml > best:
            best_h = h.copy()
    return best_h, trace


class GpModel(DynamicsModel):
    """Independent exact GP per output dimension, with uniform subsampling
    of the buffer down to ``n_max`` points before each fit."""

    kind = "gp"

    def __init__(self, state_dim: int, action_dim: int, n_max: int = 512, opt_steps: int = 50,
                 lr: float = 0.05, hyper: GpHyper | list[GpHyper] | None = None, **kw):
        super().__init__(state_dim, action_dim, **kw)
        self.n_max = n_max
        self.opt_steps = opt_steps
        self.lr = lr
        if hyper is None:
            hyper = GpHyper()
        if isinstance(hyper, GpHyper):
            hyper = [GpHyper(**vars(hyper)) for _ in range(self.out_dim)]
        self.hypers: list[GpHyper] = list(hyper)
        self.posteriors: list[GpPosterior] = []
        self.lml_traces: list[list[float]] = []

    def _fit_normalized(self, x, y, rng):
        if len(x) > self.n_max:
            idx = np.sort(rng.choice(len(x), size=self.n_max, replace=False))
            x, y = x[idx], y[idx]
        self.posteriors, self.lml_traces = [], []
        for d in range(self.out_dim):
            h, trace = _optimise_hyper(x, y[:, d], self.hypers[d].as_array(), self.opt_steps, self.lr)
            self.hypers[d] = GpHyper.from_array(h)
            self.lml_traces.append(trace)
            self.posteriors.append(GpPosterior(x, y[:, d], self.hypers[d]))
        self.fit_info = {"n": len(x), "lml": [p.log_marginal_likelihood() for p in self.posteriors]}

    def _features(self, x):
        return x

    def _predict(self, s, x) -> Single:
        z = self._features(x)
        means, epis = [], []
        for p in self.posteriors:
            m, v = p.predict(z)
            means.append(m)
            epis.append(v)
        mean = self._to_output(s, np.stack(means, axis=-1))
        scale2 = self.norm.std**2
        epi = np.stack(epis, axis=-1) * scale2
        noise = np.array([h.noise_var for h in self.hypers]) * scale2
        return Single(GaussianDiag(mean, epi + noise), epi)

    def predictive_cov(self, s, a) -> np.ndarray:
        """Full predictive covariance (latent + noise) over the query rows,
        one ``(N, N)`` block per output dimension, in output units."""
        self._check()
        z = self._features(self.inputs(s, a))
        covs = []
        for d, p in enumerate(self.posteriors):
            c = p.latent_cov(z) + p.hyper.noise_var * np.eye(len(z))
            covs.append(c * self.norm.std[d] ** 2)
        return np.stack(covs)

    def state_dict(self) -> dict:
        d = self._base_state()
        d.update(n_max=self.n_max, opt_steps=self.opt_steps, lr=self.lr,
                 hypers=np.array([h.as_array() for h in self.hypers]))
        if self.posteriors:
            d["train_x"] = self.posteriors[0].x
            d["train_y"] = np.stack([p.y for p in self.posteriors], axis=1)
        return d

    @classmethod
    def from_state_dict(cls, d: dict) -> "GpModel":
        m = cls(int(d["state_dim"]), int(d["action_dim"]), n_max=int(d["n_max"]),
                opt_steps=int(d["opt_steps"]), lr=float(d["lr"]),
                hyper=[GpHyper.from_array(h) for h in d["hypers"]],
                state_low=d.get("state_low"), state_high=d.get("state_high"),
                normalize=bool(d["normalize"]), predict_delta=bool(d["predict_delta"]))
        m._load_base(d)
        if "train_x" in d:
            m.posteriors = [GpPosterior(d["train_x"], d["train_y"][:, k], m.hypers[k]) for k in range(m.out_dim)]
        return m


# ---------------------------------------------------------------------------
# Deep kernel
# ---------------------------------------------------------------------------


class DeepKernelModel(GpModel):
    """GP heads on a shared learned feature map ``φ(s, a)``.

    ``feature_map="identity"`` bypasses the network, which reduces the
    model to :class:`GpModel` (useful as a consistency check).
    """

    kind = "dk"

    def __init__(self, state_dim: int, action_dim: int, latent_dim: int = 8,
                 hidden: tuple[int, ...] = (32, 32), feature_map: str = "mlp",
                 n_max: int = 256, opt_steps: int = 50, lr: float = 0.01, seed: int = 0, **kw):
        super().__init__(state_dim, action_dim, n_max=n_max, opt_steps=opt_steps, lr=lr, **kw)
        self.latent_dim = latent_dim if feature_map == "mlp" else self.in_dim
        self.hidden = tuple(hidden)
        self.feature_map = feature_map
        self.seed = seed
        self.net: Mlp | None = None
        if feature_map == "mlp":
            self.net = Mlp.init([self.in_dim, *self.hidden, latent_dim], Rng(seed).child("dk-features"), "tanh")
        elif feature_map != "identity":
            raise ValueError(f"unknown feature map {feature_map!r}")

    def _features(self, x):
        return x if self.net is None else self.net(x)

    def _fit_normalized(self, x, y, rng):
        if self.net is None:
            return super()._fit_normalized(x, y, rng)
        if len(x) > self.n_max:
            idx = np.sort(rng.choice(len(x), size=self.n_max, replace=False))
            x, y = x[idx], y[idx]
        hyp = np.array([h.as_array() for h in self.hypers])
        params = self.net.params() + [hyp]
        opt = Adam(params, self.lr, max_grad_norm=10.0)
        trace = []
        for _ in range(self.opt_steps):
            phi, tape = mlp_forward(self.net, x)
            sqd = sq_dist(phi, phi)
            total, g_phi, g_h = 0.0, np.zeros_like(phi), np.zeros_like(hyp)
            for d in range(self.out_dim):
                lml, gh, a = lml_and_grad(phi, y[:, d], hyp[d], sqd)
                total += lml
                g_h[d] = gh
                ell2 = np.exp(2.0 * hyp[d, 0])
                g_phi += -(2.0 / ell2) * (a.sum(1)[:, None] * phi - a @ phi)
            trace.append(total)
            g_net, _ = mlp_backward(self.net, tape, -g_phi / len(x))
            params = opt.step(params, g_net + [-g_h / len(x)])
            self.net.set_params(params[:-1])
            hyp = np.clip(params[-1], HYPER_BOUNDS[:, 0], HYPER_BOUNDS[:, 1])
            params[-1] = hyp
        self.hypers = [GpHyper.from_array(h) for h in hyp]
        phi = self._features(x)
        self.posteriors = [GpPosterior(phi, y[:, d], self.hypers[d]) for d in range(self.out_dim)]
        self.lml_traces = [trace]
        self.fit_info = {"n": len(x), "lml": [p.log_marginal_likelihood() for p in self.posteriors]}

    def state_dict(self) -> dict:
        d = super().state_dict()
        d.update(latent_dim=self.latent_dim, hidden=np.array(self.hidden), feature_map=self.feature_map,
                 seed=self.seed)
        if self.net is not None:
            d["net_params"] = self.net.params()
        if self.posteriors:
            d["train_phi"] = self.posteriors[0].x
        return d

    @classmethod
    def from_state_dict(cls, d: dict) -> "DeepKernelModel":
        m = cls(int(d["state_dim"]), int(d["action_dim"]), latent_dim=int(d["latent_dim"]),
                hidden=tuple(int(h) for h in d["hidden"]), feature_map=str(d["feature_map"]),
                n_max=int(d["n_max"]), opt_steps=int(d["opt_steps"]), lr=float(d["lr"]),
                seed=int(d["seed"]), hyper=[GpHyper.from_array(h) for h in d["hypers"]],
                state_low=d.get("state_low"), state_high=d.get("state_high"),
                normalize=bool(d["normalize"]), predict_delta=bool(d["predict_delta"]))
        m._load_base(d)
        if m.net is not None:
            m.net.set_params([np.asarray(p) for p in d["net_params"]])
        if "train_phi" in d:
            m.posteriors = [GpPosterior(d["train_phi"], d["train_y"][:, k], m.hypers[k]) for k in range(m.out_dim)]
        return m


# ---------------------------------------------------------------------------
# Deep ensemble
# ---------------------------------------------------------------------------


class DeepEnsembleModel(DynamicsModel):
    """``M`` probabilistic MLPs trained independently on the Gaussian NLL.

    Members differ only in initialisation and minibatch order. The whole
    ensemble is stored as one member-batched :class:`Mlp` so a training step
    for all members is a handful of batched matrix products.
    """

    kind = "de"

    def __init__(self, state_dim: int, action_dim: int, n_members: int = 5,
                 hidden: tuple[int, ...] = (64, 64), activation: str = "relu", epochs: int = 10,
                 batch_size: int = 32, lr: float = 1e-3, max_steps: int | None = None,
                 weight_decay: float = 0.0, seed: int = 0, **kw):
        super().__init__(state_dim, action_dim, **kw)
        if n_members < 2:
            raise ValueError("an ensemble needs at least two members")
        self.n_members = n_members
        self.hidden = tuple(hidden)
        self.activation = activation
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.max_steps = max_steps
        self.weight_decay = weight_decay
        self.seed = seed
        sizes = [self.in_dim, *self.hidden, 2 * self.out_dim]
        nets = [Mlp.init(sizes, Rng(seed).child("de-init").child(m), activation) for m in range(n_members)]
        self.net = Mlp(
            [np.stack([n.weights[i] for n in nets]) for i in range(len(sizes) - 1)],
            [np.stack([n.biases[i] for n in nets]) for i in range(len(sizes) - 1)],
            activation, logvar_dim=self.out_dim,
        )
        self.opt = Adam(self.net.params(), lr)
        self.loss_trace: list[float] = []

    def _member_batches(self, n: int, rng: Rng) -> np.ndarray:
        """Minibatch index table of shape (steps, M, B), one shuffle stream per member."""
        b = self.batch_size
        per_epoch = max(1, int(np.ceil(n / b)))
        steps = self.epochs * per_epoch
        if self.max_steps is not None:
            steps = min(steps, self.max_steps)
        need = steps * b
        cols = []
        for m in range(self.n_members):
            stream = rng.child("shuffle").child(m)
            chunks, have = [], 0
            while have < need:
                chunks.append(stream.permutation(n))
                have += n
            cols.append(np.concatenate(chunks)[:need])
        idx = np.stack(cols)                      # (M, steps*B)
        return idx.reshape(self.n_members, steps, b).transpose(1, 0, 2)

    def nll_and_grad(self, x: np.ndarray, y: np.ndarray):
        """Mean Gaussian NLL per member on member-stacked batches ``x (M, B, in)``,
        ``y (M, B, D)``; returns the loss vector and parameter gradients."""
        out, tape = mlp_forward(self.net, x)
        d = self.out_dim
        mu, lv = out[..., :d], out[..., d:]
        inv = np.exp(-lv)
        err = mu - y
        nll = 0.5 * (LOG_2PI + lv + err * err * inv).sum(-1)     # (M, B)
        bsz = x.shape[-2]
        g = np.concatenate([err * inv, 0.5 * (1.0 - err * err * inv)], axis=-1) / bsz
        grads, _ = mlp_backward(self.net, tape, g)
        return nll.mean(-1), grads

    def _fit_normalized(self, x, y, rng):
        batches = self._member_batches(len(x), rng)
        params = self.net.params()
        losses = []
        for idx in batches:
            loss, grads = self.nll_and_grad(x[idx], y[idx])
            if self.weight_decay:
                grads = [g + self.weight_decay * p for g, p in zip(grads, params)]
            params = self.opt.step(params, grads)
            self.net.set_params(params)
            losses.append(float(loss.mean()))
        self.loss_trace = losses
        self.fit_info = {"n": len(x), "steps": len(batches), "nll": losses[-1] if losses else float("nan")}

    def _predict(self, s, x) -> Mixture:
        out = self.net(np.broadcast_to(x, (self.n_members,) + x.shape))
        d = self.out_dim
        mean = self._to_output(s, out[..., :d])
        var = np.exp(out[..., d:]) * self.norm.std**2
        return Mixture(mean, var)

    def state_dict(self) -> dict:
        d = self._base_state()
        d.update(n_members=self.n_members, hidden=np.array(self.hidden), activation=self.activation,
                 epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                 max_steps=-1 if self.max_steps is None else self.max_steps,
                 weight_decay=self.weight_decay, seed=self.seed, net_params=self.net.params(),
                 adam_m=list(self.opt.state.m), adam_v=list(self.opt.state.v), adam_t=self.opt.state.t)
        return d

    @classmethod
    def from_state_dict(cls, d: dict) -> "DeepEnsembleModel":
        from .numerics import AdamState

        max_steps = int(d["max_steps"])
        m = cls(int(d["state_dim"]), int(d["action_dim"]), n_members=int(d["n_members"]),
                hidden=tuple(int(h) for h in d["hidden"]), activation=str(d["activation"]),
                epochs=int(d["epochs"]), batch_size=int(d["batch_size"]), lr=float(d["lr"]),
                max_steps=None if max_steps < 0 else max_steps, weight_decay=float(d["weight_decay"]),
                seed=int(d["seed"]), state_low=d.get("state_low"), state_high=d.get("state_high"),
                normalize=bool(d["normalize"]), predict_delta=bool(d["predict_delta"]))
        m._load_base(d)
        m.net.set_params([np.asarray(p) for p in d["net_params"]])
        m.opt.state = AdamState(tuple(np.asarray(a) for a in d["adam_m"]),
                                tuple(np.asarray(a) for a in d["adam_v"]), int(d["adam_t"]))
        return m


MODEL_KINDS = {"gp": GpModel, "dk": DeepKernelModel, "de": DeepEnsembleModel}


def make_model(kind: str, state_dim: int, action_dim: int, **kw) -> DynamicsModel:
    try:
        cls = MODEL_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown dynamics model kind {kind!r}") from None
    return cls(state_dim, action_dim, **kw)


__all__ = [
    "DeepEnsembleModel", "DeepKernelModel", "DynamicsModel", "GpHyper", "GpModel", "GpPosterior",
    "Mixture", "NotFitted", "NotPositiveDefinite", "PosteriorPredictive", "Single", "gp_posterior",
    "lml_and_grad", "make_model", "se_kernel",
]
