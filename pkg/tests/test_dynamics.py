import numpy as np
import pytest

from ptsbe.buffer import Transition, TransitionBuffer
from ptsbe.checkpoint import load_model, save_checkpoint
from ptsbe.dynamics import (
    DeepEnsembleModel,
    DeepKernelModel,
    GpHyper,
    GpModel,
    GpPosterior,
    Mixture,
    NotFitted,
    Single,
    gp_posterior,
    lml_and_grad,
    make_model,
    se_kernel,
    sq_dist,
)
from ptsbe.numerics import GaussianDiag, Rng, mlp_backward, mlp_forward


def brute_force_gp(x, y, h: GpHyper, xs):
    """Textbook GP equations with an explicit matrix inverse."""
    def k(a, b):
        d = np.array([[np.sum((ai - bj) ** 2) for bj in b] for ai in a])
        return h.signal_var * np.exp(-d / (2 * h.lengthscale**2))

    kinv = np.linalg.inv(k(x, x) + h.noise_var * np.eye(len(x)))
    ks = k(xs, x)
    mean = ks @ kinv @ y
    var = np.diag(k(xs, xs) - ks @ kinv @ ks.T) + h.noise_var
    return mean, var


@pytest.mark.parametrize("n", [1, 3, 8])
def test_gp_posterior_matches_explicit_inverse(n):
    rng = np.random.default_rng(n)
    x = rng.uniform(-2, 2, size=(n, 2))
    y = np.sin(x[:, 0]) + 0.3 * x[:, 1]
    xs = rng.uniform(-3, 3, size=(5, 2))
    h = GpHyper(np.log(0.8), np.log(1.5), np.log(0.05))
    g = gp_posterior(x, y, h, xs)
    mean, var = brute_force_gp(x, y, h, xs)
    assert np.allclose(g.mean, mean, atol=1e-8) and np.allclose(g.var, var, atol=1e-8)


def test_gp_one_point_closed_form():
    h = GpHyper(0.0, 0.0, np.log(1e-4))
    g = gp_posterior(np.array([[0.3]]), np.array([2.0]), h, np.array([[0.3]]))
    assert g.mean[0] == pytest.approx(2.0 / (1.0 + 1e-4), abs=1e-10)
    assert g.var[0] == pytest.approx(1.0 - 1.0 / (1.0 + 1e-4) + 1e-4, abs=1e-10)


def test_gp_interpolates_training_inputs():
    x = np.linspace(-1, 1, 6)[:, None]
    y = x[:, 0] ** 2
    h = GpHyper(np.log(0.5), 0.0, np.log(1e-12))
    g = gp_posterior(x, y, h, x, include_noise=False)
    assert np.allclose(g.mean, y, atol=1e-5)
    assert np.all(g.var < 1e-6)


def test_se_kernel_and_sq_dist():
    a = np.array([[0.0, 0.0], [1.0, 1.0]])
    assert np.allclose(sq_dist(a, a), [[0, 2], [2, 0]])
    k = se_kernel(a, a, 1.0, 2.0)
    assert np.allclose(np.diag(k), 2.0) and k[0, 1] == pytest.approx(2.0 * np.exp(-1.0))


def test_latent_cov_diagonal_matches_predict():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(10, 2)), rng.normal(size=10)
    post = GpPosterior(x, y, GpHyper())
    xs = rng.normal(size=(4, 2))
    assert np.allclose(np.diag(post.latent_cov(xs)), post.predict(xs)[1], atol=1e-10)


def test_lml_matches_log_density_and_gradient_fd():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(12, 2)), rng.normal(size=12)
    h = np.array([np.log(0.7), np.log(1.3), np.log(0.1)])
    lml, grad, _ = lml_and_grad(x, y, h)
    k = se_kernel(x, x, np.exp(h[0]), np.exp(h[1])) + np.exp(h[2]) * np.eye(12)
    ref = -0.5 * y @ np.linalg.solve(k, y) - 0.5 * np.linalg.slogdet(k)[1] - 6 * np.log(2 * np.pi)
    assert lml == pytest.approx(ref, rel=1e-10)
    assert lml == pytest.approx(GpPosterior(x, y, GpHyper.from_array(h)).log_marginal_likelihood(), rel=1e-10)
    for i in range(3):
        e = np.zeros(3)
        e[i] = 1e-6
        num = (lml_and_grad(x, y, h + e)[0] - lml_and_grad(x, y, h - e)[0]) / 2e-6
        assert grad[i] == pytest.approx(num, rel=1e-4)


def test_deep_kernel_feature_gradient_fd():
    rng = np.random.default_rng(2)
    phi, y = rng.normal(size=(9, 3)), rng.normal(size=9)
    h = np.array([np.log(1.1), 0.2, np.log(0.05)])
    _, _, a = lml_and_grad(phi, y, h)
    g = -(2.0 / np.exp(2 * h[0])) * (a.sum(1)[:, None] * phi - a @ phi)
    for i, j in [(0, 0), (3, 2), (8, 1)]:
        d = np.zeros_like(phi)
        d[i, j] = 1e-6
        num = (lml_and_grad(phi + d, y, h)[0] - lml_and_grad(phi - d, y, h)[0]) / 2e-6
        assert g[i, j] == pytest.approx(num, rel=1e-4, abs=1e-8)


def test_ensemble_nll_gradient_fd():
    m = DeepEnsembleModel(2, 1, n_members=3, hidden=(8,), seed=0)
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(3, 6, 3)), rng.normal(size=(3, 6, 3))
    _, grads = m.nll_and_grad(x, y)
    params = m.net.params()
    for k in (0, len(params) - 1):
        flat = params[k].reshape(-1)
        for i in (0, flat.size // 2):
            old = flat[i]
            flat[i] = old + 1e-6
            up = m.nll_and_grad(x, y)[0].sum()
            flat[i] = old - 1e-6
            dn = m.nll_and_grad(x, y)[0].sum()
            flat[i] = old
            assert grads[k].reshape(-1)[i] == pytest.approx((up - dn) / 2e-6, rel=1e-4, abs=1e-8)


# -- model interface ----------------------------------------------------------


def _buffer(n=60, seed=0):
    rng = np.random.default_rng(seed)
    buf = TransitionBuffer()
    for _ in range(n):
        s = rng.uniform(-1, 1, size=2)
        a = int(rng.integers(3))
        ae = np.array([a - 1.0])
        s2 = np.clip(s + 0.1 * np.array([np.sin(3 * s[1]), ae[0]]), -1, 1)
        buf.add(Transition(s, np.array([a]), ae, float(s2[0] > 0.5), s2, False))
    return buf


@pytest.mark.parametrize("kind", ["gp", "dk", "de"])
def test_models_fit_and_predict(kind):
    kw = {"opt_steps": 10} if kind != "de" else {"epochs": 5}
    m = make_model(kind, 2, 1, state_low=-np.ones(2), state_high=np.ones(2), **kw)
    with pytest.raises(NotFitted):
        m.predict(np.zeros((1, 2)), np.zeros((1, 1)))
    buf = _buffer()
    m.fit(buf, Rng(0))
    pp = m.predict(buf.states[:5], buf.actions_enc[:5])
    assert pp.mean.shape == (5, 3)
    if kind == "de":
        assert isinstance(pp, Mixture) and pp.n_members == 5
    else:
        assert isinstance(pp, Single) and np.all(pp.epistemic_var >= 0) and np.all(pp.noise_var > 0)
    r, s2 = m.sample_next(buf.states[:5], buf.actions_enc[:5], Rng(1))
    assert r.shape == (5,) and s2.shape == (5, 2) and np.all(np.abs(s2) <= 1)


def test_gp_learns_simple_dynamics():
    m = GpModel(2, 1, opt_steps=30)
    buf = _buffer(120)
    m.fit(buf, Rng(0))
    pp = m.predict(buf.states, buf.actions_enc)
    assert np.mean(np.abs(pp.mean[:, 1:] - buf.next_states)) < 0.02


def test_gp_hyperparameter_optimisation_improves_lml():
    m = GpModel(2, 1, opt_steps=40)
    m.fit(_buffer(80), Rng(0))
    for trace in m.lml_traces:
        assert max(trace) >= trace[0]


def test_gp_subsamples_to_cap():
    m = GpModel(2, 1, n_max=30, opt_steps=0)
    m.fit(_buffer(100), Rng(0))
    assert m.fit_info["n"] == 30


def test_identity_deep_kernel_equals_gp():
    buf = _buffer(40)
    gp = GpModel(2, 1, opt_steps=5, lr=0.05)
    dk = DeepKernelModel(2, 1, feature_map="identity", opt_steps=5, lr=0.05)
    gp.fit(buf, Rng(0))
    dk.fit(buf, Rng(0))
    a, b = gp.predict(buf.states[:7], buf.actions_enc[:7]), dk.predict(buf.states[:7], buf.actions_enc[:7])
    assert np.allclose(a.mean, b.mean) and np.allclose(a.dist.var, b.dist.var)


def test_ensemble_fit_reduces_loss_and_respects_step_cap():
    m = DeepEnsembleModel(2, 1, epochs=20, max_steps=25, seed=1)
    m.fit(_buffer(200), Rng(0))
    assert m.fit_info["steps"] == 25
    assert np.mean(m.loss_trace[-5:]) < np.mean(m.loss_trace[:5])


def test_ensemble_members_disagree_off_data():
    m = DeepEnsembleModel(2, 1, epochs=30, seed=0)
    m.fit(_buffer(100), Rng(0))
    near = m.predict(np.zeros((1, 2)), np.zeros((1, 1))).means.var(axis=0).sum()
    far = m.predict(np.full((1, 2), 6.0), np.full((1, 1), 6.0)).means.var(axis=0).sum()
    assert far > near


def test_fit_is_deterministic():
    preds = []
    for _ in range(2):
        m = DeepEnsembleModel(2, 1, seed=3)
        m.fit(_buffer(), Rng(9))
        preds.append(m.predict(np.zeros((2, 2)), np.zeros((2, 1))).means)
    assert np.array_equal(preds[0], preds[1])


def test_delta_targets_and_normalisation():
    m = GpModel(1, 1)
    y = m.targets(np.array([[1.0], [2.0]]), np.array([0.5, 0.0]), np.array([[1.5], [1.0]]))
    assert np.allclose(y, [[0.5, 0.5], [0.0, -1.0]])
    m2 = GpModel(1, 1, predict_delta=False)
    assert np.allclose(m2.targets(np.array([[1.0]]), np.array([0.0]), np.array([[3.0]])), [[0.0, 3.0]])


def test_empty_buffer_rejected():
    with pytest.raises(ValueError):
        GpModel(2, 1).fit(TransitionBuffer(), Rng(0))


def test_mixture_validation():
    with pytest.raises(ValueError):
        Mixture(np.zeros((1, 2, 3)), np.ones((1, 2, 3)))
    with pytest.raises(ValueError):
        Mixture(np.zeros((2, 3)), np.ones((2, 4)))
    mix = Mixture.of([GaussianDiag(np.zeros(2), np.ones(2)), GaussianDiag(np.ones(2), np.ones(2))])
    assert np.allclose(mix.mean, 0.5) and mix.select([1]).dim == 1


@pytest.mark.parametrize("kind", ["gp", "dk", "de"])
def test_checkpoint_roundtrip(kind, tmp_path):
    kw = {"opt_steps": 5} if kind != "de" else {"epochs": 2}
    m = make_model(kind, 2, 1, state_low=-np.ones(2), state_high=np.ones(2), **kw)
    buf = _buffer()
    m.fit(buf, Rng(0))
    path = tmp_path / f"{kind}.npz"
    save_checkpoint(path, m.state_dict())
    m2 = load_model(path)
    a, b = m.predict(buf.states[:4], buf.actions_enc[:4]), m2.predict(buf.states[:4], buf.actions_enc[:4])
    assert np.array_equal(a.mean, b.mean)
    # continued training is identical too
    m.fit(buf, Rng(1))
    m2.fit(buf, Rng(1))
    assert np.array_equal(m.predict(buf.states[:4], buf.actions_enc[:4]).mean,
                          m2.predict(buf.states[:4], buf.actions_enc[:4]).mean)


def test_load_model_rejects_other_checkpoints(tmp_path):
    save_checkpoint(tmp_path / "x.npz", {"kind": "ppo", "w": np.zeros(2)})
    with pytest.raises(ValueError):
        load_model(tmp_path / "x.npz")


def test_predictive_cov_matches_predict():
    m = GpModel(2, 1, opt_steps=5)
    buf = _buffer()
    m.fit(buf, Rng(0))
    cov = m.predictive_cov(buf.states[:6], buf.actions_enc[:6])
    pp = m.predict(buf.states[:6], buf.actions_enc[:6])
    assert cov.shape == (3, 6, 6)
    assert np.allclose(np.diagonal(cov, axis1=1, axis2=2).T, pp.dist.var)


def test_dk_feature_backprop_is_consistent():
    m = DeepKernelModel(2, 1, opt_steps=0)
    x = np.random.default_rng(0).normal(size=(5, 3))
    out, tape = mlp_forward(m.net, x)
    grads, _ = mlp_backward(m.net, tape, np.ones_like(out))
    assert len(grads) == len(m.net.params())
