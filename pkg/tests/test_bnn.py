import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from influence_loo.bnn import (
    VAR_FLOOR,
    build_bnn,
    bnn_grad,
    bnn_last_layer_grad,
    bnn_last_layer_grads,
    elbo_and_grad,
    elbo_loss,
    kl_divergence,
    logit_moments,
    mean_network,
    moment_trace,
    nll_loss,
    per_instance_nll,
    propagate_moments,
)
from influence_loo.data import Dataset
from influence_loo.linalg import RngStream
from influence_loo.mlp import ArchSpec, forward, softmax

from conftest import central_grad, rel_err

A43 = ArchSpec(4, 1, 5, 3)


def _batch(seed, n=6):
    X = RngStream(seed).normal(n * 4).reshape(n, 4)
    return Dataset(X, np.arange(n) % 3, 3)


def _bnn(seed, logvar=-3.0, arch=A43, kl=0.1):
    m = build_bnn(arch, RngStream(seed), init_logvar=logvar, kl_weight=kl)
    return m.with_theta(m.theta + np.r_[0.1 * RngStream(seed + 50).normal(arch.n_params), np.zeros(arch.n_params)])


def test_build_values():
    m = build_bnn(A43, RngStream(0), init_logvar=-6.0)
    assert len(m.theta) == 86
    assert np.allclose(np.exp(m.logvars.values), np.exp(-6.0))
    assert abs(np.exp(-6.0) - 2.48e-3) < 1e-5
    assert np.array_equal(build_bnn(A43, RngStream(0)).theta, m.theta)


def test_hand_affine_moments():
    arch = ArchSpec(1, 0, 0, 1)
    m = build_bnn(arch, RngStream(0))
    m = m.with_theta(np.array([2.0, 0.0, np.log(0.5), np.log(0.1)]))
    mp = logit_moments(m, np.array([1.0]))
    assert abs(mp.mean[0] - 2.0) < 1e-15
    assert abs(mp.variance[0] - 0.6) < 1e-15


def test_zero_variance_matches_mean_network():
    m = _bnn(1, logvar=-200.0)
    x = RngStream(2).normal(4)
    mp = propagate_moments(m, x)
    assert np.max(np.abs(mp.mean - softmax(forward(mean_network(m), x)))) < 1e-14
    assert np.max(mp.variance) < 1e-80


def test_output_mean_ignores_variance():
    x = RngStream(3).normal(4)
    gaps = []
    for lv in (-8.0, -9.0, -10.0):
        m = _bnn(4, logvar=lv)
        gaps.append(np.max(np.abs(propagate_moments(m, x).mean - softmax(forward(mean_network(m), x)))))
    assert max(gaps) < 1e-14


def test_softmax_variance_diagonal_rule():
    m = _bnn(5)
    x = RngStream(6).normal(4)
    lm, out = logit_moments(m, x), propagate_moments(m, x)
    p = softmax(lm.mean)
    assert np.allclose(out.variance, (p * (1 - p)) ** 2 * lm.variance, rtol=1e-13, atol=0)


def test_monte_carlo_away_from_kink():
    """Every hidden unit sits >= 4 sigma from the ReLU kink; Taylor moments are then accurate."""
    std = 0.1
    m = build_bnn(A43, RngStream(7), init_logvar=2 * np.log(std))
    x = np.array([0.5, -1.0, 1.2, 0.3])
    th = m.theta.copy()
    W1 = th[:20].reshape(5, 4)
    th[20:25] = np.array([1.0, -1.0, 1.0, 1.0, -1.0]) - W1 @ x
    m = m.with_theta(th)
    mz, vz = moment_trace(m, x)[1].mean[0], moment_trace(m, x)[1].variance[0]
    assert np.min(np.abs(mz) / np.sqrt(vz)) > 4
    rng = np.random.default_rng(0)
    n = 100_000
    s = m.means.values + std * rng.standard_normal((n, 43))
    h = np.maximum(np.einsum("nij,j->ni", s[:, :20].reshape(n, 5, 4), x) + s[:, 20:25], 0)
    out = np.einsum("nij,nj->ni", s[:, 25:40].reshape(n, 3, 5), h) + s[:, 40:43]
    mp = logit_moments(m, x)
    assert rel_err(mp.mean, out.mean(0)) < 0.01
    assert np.max(np.abs(mp.variance - out.var(0)) / out.var(0)) < 0.05


def test_nll_zero_residual():
    arch = ArchSpec(1, 0, 0, 2)
    m = build_bnn(arch, RngStream(0)).with_theta(np.array([0.0, 0.0, 400.0, -400.0, 0, 0, 0, 0]))
    c = VAR_FLOOR
    z = Dataset(np.array([[0.0]]), np.array([0]), 2)
    assert abs(per_instance_nll(m, z)[0] - 2 * 0.5 * np.log(c)) < 1e-9


def test_kl_prior_identity():
    m = build_bnn(A43, RngStream(0), init_logvar=0.0)
    m = m.with_theta(np.zeros(86))
    assert kl_divergence(m) == 0.0
    _, g_kl_only = elbo_and_grad(m, _batch(1))
    _, g_nll = elbo_and_grad(m.__class__(m.arch, m.means, m.logvars, 1e-300), _batch(1))
    assert np.max(np.abs(g_kl_only - g_nll)) < 1e-12


@pytest.mark.parametrize("act", ["relu", "selu"])
def test_elbo_gradient_fd(act):
    m = _bnn(8, arch=ArchSpec(4, 1, 5, 3, act))
    b = _batch(9)
    fd = central_grad(lambda th: elbo_loss(m.with_theta(th), b), m.theta)
    assert rel_err(bnn_grad(m, b), fd) < 1e-5


def test_grad_linearity():
    m = _bnn(10)
    b = _batch(11)
    kl_only = m.kl_weight * np.r_[m.means.values, 0.5 * (np.exp(m.logvars.values) - 1.0)]
    per = np.mean([bnn_grad(m, [b[i]]) - kl_only for i in range(len(b))], axis=0)
    assert np.max(np.abs(bnn_grad(m, b) - (per + kl_only))) < 1e-12


def test_last_layer_grad_restriction():
    m = _bnn(12)
    z = _batch(13)[1]
    lo, hi = m.last_layer_mean_range
    nll_only = bnn_grad(m, [z]) - m.kl_weight * np.r_[m.means.values, 0.5 * (np.exp(m.logvars.values) - 1.0)]
    assert np.max(np.abs(bnn_last_layer_grad(m, z) - nll_only[lo:hi])) < 1e-10


def test_last_layer_grad_fd():
    m = _bnn(14)
    z = _batch(15)[3]
    lo, hi = m.last_layer_mean_range

    def f(w):
        th = m.theta.copy()
        th[lo:hi] = w
        return nll_loss(m.with_theta(th), [z])

    assert rel_err(bnn_last_layer_grad(m, z), central_grad(f, m.theta[lo:hi])) < 1e-5


def test_last_layer_zero_variance_limit():
    m = _bnn(16, logvar=-200.0)
    z = _batch(17)[0]
    mean_net = mean_network(m)
    lo, hi = m.last_layer_mean_range
    y = np.eye(3)[z.label]

    def gauss_nll(w):
        th = mean_net.theta.copy()
        th[lo:hi] = w
        p = softmax(forward(mean_net.with_theta(th), z.features))
        return float(np.sum(0.5 * np.log(VAR_FLOOR) + 0.5 * (y - p) ** 2 / VAR_FLOOR))

    assert rel_err(bnn_last_layer_grad(m, z), central_grad(gauss_nll, mean_net.theta[lo:hi], h=1e-6)) < 1e-5


def test_last_layer_grads_kl_rows():
    m = _bnn(18)
    b = _batch(19)
    lo, hi = m.last_layer_mean_range
    diff = bnn_last_layer_grads(m, b, kl=True) - bnn_last_layer_grads(m, b)
    assert np.allclose(diff, m.kl_weight * m.means.values[lo:hi], atol=1e-15)


@given(st.integers(0, 100_000), st.floats(-12, 1), st.integers(0, 2))
def test_variances_nonnegative(seed, logvar, depth):
    arch = ArchSpec(4, depth, 4, 3, "relu" if seed % 2 else "selu")
    m = _bnn(seed, logvar=logvar, arch=arch)
    x = RngStream(seed + 1).normal(4) * 3
    for mp in moment_trace(m, x):
        assert np.all(mp.variance >= 0)


@given(st.integers(0, 100_000))
def test_kl_nonnegative(seed):
    r = RngStream(seed)
    m = build_bnn(A43, r).with_theta(np.r_[r.normal(43), r.normal(43) * 2])
    assert kl_divergence(m) >= 0


@given(st.integers(0, 100_000))
def test_elbo_gradient_random_seeds(seed):
    m = _bnn(seed)
    b = _batch(seed + 3)
    v, g = elbo_and_grad(m, b)
    assert abs(v - elbo_loss(m, b)) < 1e-12 * max(1.0, abs(v))
    fd = central_grad(lambda th: elbo_loss(m.with_theta(th), b), m.theta)
    assert rel_err(g, fd) < 1e-5
