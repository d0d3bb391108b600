"""Numerical substrate: Cholesky with jitter, Gaussian utilities, a small
batched MLP with hand-written backprop, Adam, and a splittable RNG.

Everything is float64. Arrays may carry leading batch axes; the MLP also
accepts a leading *member* axis on its weights so that an ensemble of
networks is evaluated with one ``matmul`` per layer.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a matrix stays indefinite after all jitter retries."""


class NonPositiveDiagonal(ValueError):
    pass


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def cholesky(a: np.ndarray, max_tries: int = 5) -> np.ndarray:
    """Lower Cholesky factor of a symmetric matrix, with jitter fallback.

    If the plain factorization fails, ``1e-8 * trace(a) / n`` is added to the
    diagonal and doubled on every further failure, up to ``max_tries`` retries.

    Raises:
        NotPositiveDefinite: if the factorization fails after all retries.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"cholesky expects a square matrix, got shape {a.shape}")
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    n = a.shape[0]
    jitter = 1e-8 * abs(np.trace(a)) / n
    if jitter == 0.0:
        jitter = 1e-8
    eye = np.eye(n)
    for _ in range(max_tries):
        try:
            return np.linalg.cholesky(a + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 2.0
    raise NotPositiveDefinite(f"matrix of size {n} not positive definite after jitter {jitter / 2:.3g}")


def log_det_chol(l: np.ndarray) -> float:
    """``log det(L Lᵀ)`` from a lower Cholesky factor."""
    d = np.diagonal(np.asarray(l))
    if np.any(d <= 0):
        raise NonPositiveDiagonal("Cholesky factor has a non-positive diagonal entry")
    return float(2.0 * np.sum(np.log(d)))


def chol_solve(l: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``(L Lᵀ) x = b``."""
    from scipy.linalg import solve_triangular

    z = solve_triangular(l, b, lower=True)
    return solve_triangular(l.T, z, lower=False)


# ---------------------------------------------------------------------------
# Gaussians
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianDiag:
    """Diagonal Gaussian over the last axis; leading axes are batch axes."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        var = np.asarray(self.var, dtype=np.float64)
        if mean.shape != var.shape:
            raise ValueError(f"mean shape {mean.shape} != var shape {var.shape}")
        if np.any(~(var > 0)):
            raise ValueError("GaussianDiag variances must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def select(self, dims) -> "GaussianDiag":
        return GaussianDiag(self.mean[..., dims], self.var[..., dims])

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        return gaussian_log_prob(self.mean, self.var, x)

    def sample(self, rng: "Rng") -> np.ndarray:
        return self.mean + np.sqrt(self.var) * rng.standard_normal(self.mean.shape)


def gaussian_entropy(g: GaussianDiag) -> np.ndarray:
    """Differential entropy ``½ log det Σ + (D/2)(1 + log 2π)`` per batch item."""
    d = g.mean.shape[-1]
    return 0.5 * np.sum(np.log(g.var), axis=-1) + 0.5 * d * (1.0 + LOG_2PI)


def gaussian_log_prob(mean, var, x) -> np.ndarray:
    return -0.5 * np.sum(LOG_2PI + np.log(var) + (x - mean) ** 2 / var, axis=-1)


def gaussian_nll(g: GaussianDiag, target: np.ndarray) -> np.ndarray:
    """Negative log-likelihood of ``target``, summed over the last axis."""
    return -gaussian_log_prob(g.mean, g.var, np.asarray(target, dtype=np.float64))


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------


class Rng:
    """Seeded, label-splittable random stream on top of numpy's Philox.

    ``Rng(7).child("env")`` always yields the same stream no matter how many
    draws were taken from the parent or from sibling children, so subsystems
    do not perturb one another.
    """

    def __init__(self, seed: int, path: Sequence[int] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, label: str | int) -> "Rng":
        key = label if isinstance(label, int) else zlib.crc32(str(label).encode())
        return Rng(self.seed, self.path + (key,))

    def __getattr__(self, name):
        # delegate draws (normal, uniform, integers, permutation, ...) to numpy
        return getattr(self._gen, name)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

_ACTIVATIONS = ("tanh", "relu")


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class Mlp:
    """Fully connected network ``in -> hidden... -> out``.

    Weights have shape ``(*members, fan_in, fan_out)``. With an empty member
    prefix this is a single network; with ``members=(M,)`` it is ``M``
    independent networks evaluated in lockstep, and inputs then carry the
    member axis first: ``(M, batch, in)``.

    When ``logvar_dim > 0`` the last ``logvar_dim`` outputs form a
    log-variance head that is soft-clamped into ``logvar_range``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"
    logvar_dim: int = 0
    logvar_range: tuple[float, float] = (-10.0, 4.0)

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def init(
        cls,
        sizes: Sequence[int],
        rng: Rng,
        activation: str = "tanh",
        members: tuple[int, ...] = (),
        logvar_dim: int = 0,
        logvar_range: tuple[float, float] = (-10.0, 4.0),
        out_scale: float = 1.0,
    ) -> "Mlp":
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            gain = np.sqrt(2.0) if activation == "relu" else 1.0
            std = gain / np.sqrt(fan_in)
            if i == len(sizes) - 2:
                std *= out_scale
            weights.append(rng.normal(0.0, std, size=members + (fan_in, fan_out)))
            biases.append(np.zeros(members + (fan_out,)))
        return cls(weights, biases, activation, logvar_dim, tuple(logvar_range))

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[-2]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[-1]

    @property
    def members(self) -> tuple[int, ...]:
        return self.weights[0].shape[:-2]

    def params(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        n = len(self.weights)
        self.weights = list(params[:n])
        self.biases = list(params[n:])

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   self.activation, self.logvar_dim, self.logvar_range)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return mlp_forward(self, x)[0]


@dataclass
class Tape:
    inputs: list[np.ndarray] = field(default_factory=list)   # input to each layer
    hidden: list[np.ndarray] = field(default_factory=list)   # post-activation values
    raw_logvar: np.ndarray | None = None


def _bias(b: np.ndarray, x: np.ndarray) -> np.ndarray:
    # biases of shape (*members, out) broadcast against (*members, batch, out)
    return b[..., None, :] if b.ndim > 1 and x.ndim == b.ndim + 1 else b


def mlp_forward(m: Mlp, x: np.ndarray) -> tuple[np.ndarray, Tape]:
    """Forward pass; returns outputs and the activation tape for backprop."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != m.in_dim:
        raise ValueError(f"input width {x.shape[-1]} != network input {m.in_dim}")
    tape = Tape()
    h = x
    last = len(m.weights) - 1
    for i, (w, b) in enumerate(zip(m.weights, m.biases)):
        tape.inputs.append(h)
        z = h @ w + _bias(b, h)
        if i < last:
            h = np.tanh(z) if m.activation == "tanh" else np.maximum(z, 0.0)
            tape.hidden.append(h)
        else:
            h = z
    if m.logvar_dim:
        lo, hi = m.logvar_range
        raw = h[..., -m.logvar_dim:]
        tape.raw_logvar = raw
        lv = hi - _softplus(hi - raw)
        lv = lo + _softplus(lv - lo)
        h = np.concatenate([h[..., :-m.logvar_dim], lv], axis=-1)
    return h, tape


def mlp_backward(m: Mlp, tape: Tape, grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Backprop ``dL/d(output)`` through the network.

    Returns:
        ``(param_grads, grad_input)`` where ``param_grads`` is ordered like
        ``m.params()`` (all weights, then all biases).
    """
    g = np.asarray(grad_out, dtype=np.float64)
    if m.logvar_dim:
        lo, hi = m.logvar_range
        raw = tape.raw_logvar
        u = hi - _softplus(hi - raw)
        dlv = _sigmoid(hi - raw) * _sigmoid(u - lo)
        g = g.copy()
        g[..., -m.logvar_dim:] *= dlv
    n = len(m.weights)
    gw: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    gb: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    for i in range(n - 1, -1, -1):
        h_in = tape.inputs[i]
        if h_in.ndim == 1:
            gw[i] = np.outer(h_in, g)
            gb[i] = g.copy()
        else:
            gw[i] = np.swapaxes(h_in, -1, -2) @ g
            gb[i] = g.sum(axis=-2)
            # a single network fed with extra leading batch axes
            extra = gw[i].ndim - m.weights[i].ndim
            if extra > 0:
                gw[i] = gw[i].sum(axis=tuple(range(extra)))
                gb[i] = gb[i].sum(axis=tuple(range(extra)))
        g = g @ np.swapaxes(m.weights[i], -1, -2)
        if i > 0:
            h = tape.hidden[i - 1]
            g = g * (1.0 - h * h) if m.activation == "tanh" else g * (h > 0)
    return gw + gb, g


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls(tuple(np.zeros_like(p) for p in params), tuple(np.zeros_like(p) for p in params), 0)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam descent step. Pure: inputs are not modified."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    t = state.t + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(tuple(new_m), tuple(new_v), t)


class Adam:
    """Stateful wrapper around :func:`adam_step` for one parameter list."""

    def __init__(self, params: Sequence[np.ndarray], lr: float, max_grad_norm: float | None = None):
        self.lr = lr
        self.max_grad_norm = max_grad_norm
        self.state = AdamState.zeros_like(params)

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> list[np.ndarray]:
        if self.max_grad_norm is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.max_grad_norm:
                grads = [g * (self.max_grad_norm / norm) for g in grads]
        new, self.state = adam_step(params, grads, self.state, self.lr)
        return new
