"""Variational dense network trained through closed-form moment propagation.

Every weight and bias carries an independent Gaussian ``N(mu, exp(logvar))``.
Inputs are deterministic, activations are pushed through a first order
Taylor expansion, and covariances between units are dropped, so each layer
maps a (mean, variance) pair to a (mean, variance) pair.

The training objective is a Gaussian negative log-likelihood of the one-hot
label under the propagated softmax moments plus ``kl_weight`` times the KL
divergence to a standard normal prior.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import as_arrays
from .linalg import RngStream
from .mlp import ArchSpec, MlpModel, ParameterVector, _act, _act_d1, _act_d2, layout_for, softmax

__all__ = [
    "MomentPair",
    "BnnModel",
    "VAR_FLOOR",
    "build_bnn",
    "propagate_moments",
    "logit_moments",
    "moment_trace",
    "elbo_loss",
    "nll_loss",
    "kl_divergence",
    "bnn_grad",
    "elbo_and_grad",
    "bnn_last_layer_grad",
    "bnn_last_layer_grads",
    "per_instance_nll",
    "mean_network",
]

VAR_FLOOR = 1e-8


@dataclass(frozen=True)
class MomentPair:
    mean: np.ndarray
    variance: np.ndarray


@dataclass(eq=False)
class BnnModel:
    arch: ArchSpec
    means: ParameterVector
    logvars: ParameterVector
    kl_weight: float = 1.0
    kind: str = field(default="bnn", init=False)

    @property
    def theta(self) -> np.ndarray:
        """Trainable values: all means followed by all log-variances."""
        return np.concatenate([self.means.values, self.logvars.values])

    @property
    def n_half(self) -> int:
        return len(self.means)

    def with_theta(self, theta: np.ndarray) -> "BnnModel":
        theta = np.asarray(theta, dtype=np.float64)
        k = self.n_half
        return replace(self, means=self.means.with_values(theta[:k].copy()), logvars=self.logvars.with_values(theta[k:].copy()))

    def copy(self) -> "BnnModel":
        return self.with_theta(self.theta)

    @property
    def last_layer_mean_range(self) -> tuple[int, int]:
        return self.means.last_layer_range


def build_bnn(arch: ArchSpec, stream: RngStream, init_logvar: float = -6.0, kl_weight: float = 1.0) -> BnnModel:
    if kl_weight <= 0:
        raise ValueError("kl_weight must be positive")
    layout = layout_for(arch)
    means = np.zeros(arch.n_params)
    for s in layout:
        means[s.w_slice] = stream.normal(s.fan_out * s.fan_in) * np.sqrt(2.0 / s.fan_in)
    return BnnModel(
        arch,
        ParameterVector(means, layout),
        ParameterVector(np.full(arch.n_params, float(init_logvar)), layout),
        float(kl_weight),
    )


def mean_network(m: BnnModel) -> MlpModel:
    return MlpModel(m.arch, m.means.copy())


def _layers(m: BnnModel, mu: np.ndarray, lv: np.ndarray):
    out = []
    for s in layout_for(m.arch):
        out.append(
            (
                mu[s.w_slice].reshape(s.fan_out, s.fan_in),
                np.exp(lv[s.w_slice]).reshape(s.fan_out, s.fan_in),
                mu[s.b_slice],
                np.exp(lv[s.b_slice]),
            )
        )
    return out


def _forward(m: BnnModel, X: np.ndarray, mu=None, lv=None):
    """Moment forward pass.

    The affine rule ``var_out = var_a var_W^T + var_a (mu_W^2)^T + mu_a^2 var_W^T + var_b``
    reduces to the deterministic-input rule when ``var_a == 0``, so one rule
    serves every layer.
    """
    mu = m.means.values if mu is None else mu
    lv = m.logvars.values if lv is None else lv
    layers = _layers(m, mu, lv)
    act = m.arch.activation
    ma, va = X, np.zeros_like(X)
    cache = []
    for li, (Wm, Wv, bm, bv) in enumerate(layers):
        mz = ma @ Wm.T + bm
        vz = va @ (Wv + Wm * Wm).T + (ma * ma) @ Wv.T + bv
        cache.append((ma, va, mz, vz))
        if li < len(layers) - 1:
            d1 = _act_d1(act, mz)
            ma, va = _act(act, mz), vz * d1 * d1
    mz, vz = cache[-1][2], cache[-1][3]
    p = softmax(mz)
    q = p * (1.0 - p)
    vy = q * q * vz
    return layers, cache, p, vy


def logit_moments(m: BnnModel, x) -> MomentPair:
    """Pre-softmax output moments."""
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _, cache, _, _ = _forward(m, X)
    mz, vz = cache[-1][2], cache[-1][3]
    if np.ndim(x) == 1:
        return MomentPair(mz[0], vz[0])
    return MomentPair(mz, vz)


def propagate_moments(m: BnnModel, x) -> MomentPair:
    """Softmax output moments; variance uses the diagonal Jacobian ``(p(1-p))^2``."""
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _, _, p, vy = _forward(m, X)
    if np.ndim(x) == 1:
        return MomentPair(p[0], vy[0])
    return MomentPair(p, vy)


def moment_trace(m: BnnModel, x) -> list[MomentPair]:
    """Every intermediate (mean, variance) pair, input to output."""
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _, cache, p, vy = _forward(m, X)
    act = m.arch.activation
    trace = []
    for li, (ma, va, mz, vz) in enumerate(cache):
        trace.append(MomentPair(ma, va))
        trace.append(MomentPair(mz, vz))
        if li < len(cache) - 1:
            d1 = _act_d1(act, mz)
            trace.append(MomentPair(_act(act, mz), vz * d1 * d1))
    trace.append(MomentPair(p, vy))
    return trace


def _one_hot(y: np.ndarray, k: int) -> np.ndarray:
    Y = np.zeros((len(y), k))
    Y[np.arange(len(y)), y] = 1.0
    return Y


def _nll_terms(p, vy, Y):
    s = np.maximum(vy, VAR_FLOOR)
    r = Y - p
    return 0.5 * np.log(s) + 0.5 * r * r / s, s, r


def per_instance_nll(m: BnnModel, batch) -> np.ndarray:
    X, y = as_arrays(batch)
    _, _, p, vy = _forward(m, X)
    terms, _, _ = _nll_terms(p, vy, _one_hot(y, m.arch.n_out))
    return terms.sum(axis=1)


def nll_loss(m: BnnModel, batch) -> float:
    return float(per_instance_nll(m, batch).mean())


def kl_divergence(m: BnnModel) -> float:
    """``KL[q || N(0, I)]`` summed over every weight and bias."""
    mu, lv = m.means.values, m.logvars.values
    return float(0.5 * np.sum(np.exp(lv) + mu * mu - 1.0 - lv))


def elbo_loss(m: BnnModel, batch) -> float:
    """Minimization objective: mean Gaussian NLL + kl_weight * KL."""
    return nll_loss(m, batch) + m.kl_weight * kl_divergence(m)


def _output_grads(p, vy, vz, Y, scale):
    """Gradients of the scaled NLL w.r.t. the pre-softmax mean and variance."""
    s = np.maximum(vy, VAR_FLOOR)
    r = Y - p
    active = vy > VAR_FLOOR
    gs = np.where(active, 0.5 / s - 0.5 * r * r / (s * s), 0.0) * scale
    q = p * (1.0 - p)
    gp = -r / s * scale + gs * 2.0 * q * (1.0 - 2.0 * p) * vz
    gmz = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
    gvz = gs * q * q
    return gmz, gvz


def _backward(m: BnnModel, layers, cache, gmz, gvz):
    act = m.arch.activation
    slots = layout_for(m.arch)
    g_mu = np.empty(m.n_half)
    g_var = np.empty(m.n_half)
    for li in range(len(layers) - 1, -1, -1):
        Wm, Wv, bm, bv = layers[li]
        ma, va, _, _ = cache[li]
        s = slots[li]
        g_mu[s.w_slice] = (gmz.T @ ma + 2.0 * Wm * (gvz.T @ va)).ravel()
        g_mu[s.b_slice] = gmz.sum(axis=0)
        g_var[s.w_slice] = (gvz.T @ (va + ma * ma)).ravel()
        g_var[s.b_slice] = gvz.sum(axis=0)
        if li:
            gma = gmz @ Wm + 2.0 * ma * (gvz @ Wv)
            gva = gvz @ (Wv + Wm * Wm)
            _, _, mz_prev, vz_prev = cache[li - 1]
            d1 = _act_d1(act, mz_prev)
            gmz = gma * d1 + gva * vz_prev * 2.0 * d1 * _act_d2(act, mz_prev)
            gvz = gva * d1 * d1
    return g_mu, g_var


def elbo_and_grad(m: BnnModel, batch) -> tuple[float, np.ndarray]:
    """ELBO objective and its gradient over ``theta`` (means then log-variances)."""
    X, y = as_arrays(batch)
    layers, cache, p, vy = _forward(m, X)
    Y = _one_hot(y, m.arch.n_out)
    terms, _, _ = _nll_terms(p, vy, Y)
    n = len(y)
    gmz, gvz = _output_grads(p, vy, cache[-1][3], Y, 1.0 / n)
    g_mu, g_var = _backward(m, layers, cache, gmz, gvz)
    mu, lv = m.means.values, m.logvars.values
    var = np.exp(lv)
    g_lv = g_var * var
    kw = m.kl_weight
    g_mu = g_mu + kw * mu
    g_lv = g_lv + kw * 0.5 * (var - 1.0)
    value = float(terms.sum() / n) + kw * kl_divergence(m)
    return value, np.concatenate([g_mu, g_lv])


def bnn_grad(m: BnnModel, batch) -> np.ndarray:
    return elbo_and_grad(m, batch)[1]


def bnn_last_layer_grads(m: BnnModel, batch, kl: bool = False) -> np.ndarray:
    """Per-instance NLL gradients w.r.t. the final layer's weight and bias means.

    Variances are held fixed. With ``kl=True`` the KL term's mean gradient
    ``kl_weight * mu`` is added to every row, mirroring how the L2 term is
    treated for deterministic networks.
    """
    X, y = as_arrays(batch)
    layers, cache, p, vy = _forward(m, X)
    Y = _one_hot(y, m.arch.n_out)
    gmz, gvz = _output_grads(p, vy, cache[-1][3], Y, 1.0)
    Wm = layers[-1][0]
    ma, va = cache[-1][0], cache[-1][1]
    gW = gmz[:, :, None] * ma[:, None, :] + 2.0 * Wm[None] * (gvz[:, :, None] * va[:, None, :])
    G = np.concatenate([gW.reshape(len(y), -1), gmz], axis=1)
    if kl:
        lo, hi = m.last_layer_mean_range
        G += m.kl_weight * m.means.values[lo:hi]
    return G


def bnn_last_layer_grad(m: BnnModel, z) -> np.ndarray:
    return bnn_last_layer_grads(m, z).mean(axis=0)
