"""Damped Hessian operator, spectral probing, inverse-HVP solvers and influence estimates.

Conventions: ``H`` is the Hessian of the mean training objective (including
its regularizer) over the chosen parameter scope and the operator applies
``H + damping * I``. Training-point gradients include the regularizer, so
that removing a point and renormalizing the mean is exactly an up-weighting
by ``epsilon = -1/n``; test-point gradients do not.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from . import bnn as bnn_mod
from . import mlp as mlp_mod
from .data import Dataset, LabeledInstance, as_arrays
from .linalg import NotPositiveDefiniteError, RngStream, solve_spd

__all__ = [
    "HessianOperator",
    "EigenResult",
    "LissaConfig",
    "LissaResult",
    "LissaDivergence",
    "InfluenceRecord",
    "dense_hessian",
    "top_eigenvalue",
    "lissa_inverse_hvp",
    "inverse_hvp",
    "influence_up_params",
    "influence_up_loss",
    "influence_scores",
    "write_influence_csv",
    "INFLUENCE_CSV_FIELDS",
]

SCOPES = ("last_layer", "all_params")
HVP_METHODS = ("analytic_double_backward", "grad_finite_difference")
SOLVE_METHODS = ("direct_solve", "lissa")


class LissaDivergence(RuntimeError):
    pass


class HessianOperator:
    """Matrix-free ``(H + damping*I) v`` over a frozen model and dataset.

    Build one with :meth:`for_model` or :meth:`for_quadratic`. ``raw_hvp``
    computes the undamped product, optionally on a subset of rows for
    stochastic solvers.
    """

    def __init__(
        self,
        dim: int,
        raw_hvp: Callable[[np.ndarray, np.ndarray | None], np.ndarray],
        damping: float = 0.0,
        scope: str = "all_params",
        method: str = "analytic_double_backward",
        n_train: int | None = None,
        train_grads: Callable | None = None,
        test_grads: Callable | None = None,
        mean_grad: Callable[[np.ndarray], np.ndarray] | None = None,
    ):
        if damping < 0:
            raise ValueError("damping must be non-negative")
        self.dim = dim
        self._raw = raw_hvp
        self.damping = float(damping)
        self.scope = scope
        self.method = method
        self.n_train = n_train
        self._train_grads = train_grads
        self._test_grads = test_grads
        self._mean_grad = mean_grad
        self._dense: np.ndarray | None = None

    @classmethod
    def for_model(cls, model, train: Dataset, damping: float = 0.01, scope: str = "last_layer", method: str | None = None, l2: float = 0.0):
        if scope not in SCOPES:
            raise ValueError(f"unknown scope {scope!r}")
        if method is None:
            method = "analytic_double_backward" if model.kind == "mlp" else "grad_finite_difference"
        if method not in HVP_METHODS:
            raise ValueError(f"unknown HVP method {method!r}")
        if model.kind == "bnn" and method == "analytic_double_backward":
            raise ValueError("variational models only support the grad_finite_difference HVP")
        X, y = train.X, train.y
        n = len(y)
        build = _mlp_parts if model.kind == "mlp" else _bnn_parts
        dim, mean_grad, analytic, train_grads, test_grads = build(model, X, y, scope, l2)

        if method == "analytic_double_backward":
            raw = analytic
        else:
            def raw(v, rows=None):
                nv = np.linalg.norm(v)
                if nv == 0:
                    return np.zeros_like(v)
                h = 1e-4 / nv
                return (mean_grad(h * v, rows) - mean_grad(-h * v, rows)) / (2 * h)

        return cls(dim, raw, damping, scope, method, n, train_grads, test_grads, lambda d: mean_grad(d, None))

    @classmethod
    def for_quadratic(cls, A: np.ndarray, damping: float = 0.0):
        """Operator for ``0.5 * theta^T A theta``; used for analytic checks."""
        A = np.asarray(A, dtype=np.float64)
        return cls(A.shape[0], lambda v, rows=None: A @ v, damping, "all_params", "analytic_double_backward")

    def raw_hvp(self, v: np.ndarray, rows: np.ndarray | None = None) -> np.ndarray:
        return self._raw(np.asarray(v, dtype=np.float64), rows)

    def hvp(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise ValueError(f"vector has shape {v.shape}, operator dimension is {self.dim}")
        out = self._raw(v, None) + self.damping * v
        bad = np.flatnonzero(~np.isfinite(out))
        if len(bad):
            raise FloatingPointError(f"non-finite Hessian-vector product at coordinate {int(bad[0])}")
        return out

    def undamped_hvp(self, v) -> np.ndarray:
        return self.hvp(v) - self.damping * np.asarray(v, dtype=np.float64)

    def train_gradients(self, batch) -> np.ndarray:
        """Per-instance training-objective gradients (regularizer included), one row each."""
        return self._train_grads(batch)

    def test_gradient(self, z) -> np.ndarray:
        """Gradient of the unregularized loss of one instance."""
        return self._test_grads(z)[0]

    def gradient_norm(self) -> float:
        return float(np.linalg.norm(self._mean_grad(np.zeros(self.dim))))

    def dense(self) -> np.ndarray:
        if self._dense is None:
            A = dense_hessian(self)
            self._dense = 0.5 * (A + A.T)
        return self._dense

    def is_positive_definite(self) -> bool:
        try:
            np.linalg.cholesky(self.dense())
        except np.linalg.LinAlgError:
            return False
        return True


def _mlp_parts(model, X, y, scope, l2):
    theta = model.theta
    arch = model.arch
    lo, hi = model.params.last_layer_range
    n = len(y)

    if scope == "all_params":
        dim = theta.shape[0]

        def mean_grad(d, rows=None):
            Xs, ys = (X, y) if rows is None else (X[rows], y[rows])
            return mlp_mod._loss_grad(arch, theta + d, Xs, ys, l2)[1]

        def analytic(v, rows=None):
            Xs, ys = (X, y) if rows is None else (X[rows], y[rows])
            return mlp_mod._hvp(arch, theta, Xs, ys, l2, v)

        def train_grads(batch):
            Xb, yb = as_arrays(batch)
            return np.stack([mlp_mod._loss_grad(arch, theta, Xb[i : i + 1], yb[i : i + 1], l2)[1] for i in range(len(yb))])

        def test_grads(batch):
            Xb, yb = as_arrays(batch)
            return np.stack([mlp_mod._loss_grad(arch, theta, Xb[i : i + 1], yb[i : i + 1], 0.0)[1] for i in range(len(yb))])

        return dim, mean_grad, analytic, train_grads, test_grads

    s = model.params.layout[-1]
    k, m = s.fan_out, s.fan_in
    dim = hi - lo
    feats = mlp_mod.features(model, X)
    w0 = theta[lo:hi]

    def mean_grad(d, rows=None):
        H, ys = (feats, y) if rows is None else (feats[rows], y[rows])
        w = w0 + d
        r = mlp_mod.softmax(H @ w[: k * m].reshape(k, m).T + w[k * m :])
        r[np.arange(len(ys)), ys] -= 1.0
        r /= len(ys)
        return np.concatenate([(r.T @ H).ravel(), r.sum(axis=0)]) + l2 * w

    p_all = mlp_mod.softmax(feats @ w0[: k * m].reshape(k, m).T + w0[k * m :])

    def analytic(v, rows=None):
        H, p = (feats, p_all) if rows is None else (feats[rows], p_all[rows])
        rz = H @ v[: k * m].reshape(k, m).T + v[k * m :]
        rp = p * (rz - (p * rz).sum(axis=1, keepdims=True)) / len(H)
        return np.concatenate([(rp.T @ H).ravel(), rp.sum(axis=0)]) + l2 * v

    def train_grads(batch):
        Xb, yb = as_arrays(batch)
        return mlp_mod.last_layer_grads(model, (Xb, yb), l2)

    def test_grads(batch):
        Xb, yb = as_arrays(batch)
        return mlp_mod.last_layer_grads(model, (Xb, yb), 0.0)

    return dim, mean_grad, analytic, train_grads, test_grads


def _bnn_parts(model, X, y, scope, l2):
    theta = model.theta

    if scope == "all_params":
        dim = theta.shape[0]

        def mean_grad(d, rows=None):
            Xs, ys = (X, y) if rows is None else (X[rows], y[rows])
            return bnn_mod.elbo_and_grad(model.with_theta(theta + d), (Xs, ys))[1]

        def per_instance(batch, kl):
            Xb, yb = as_arrays(batch)
            out = []
            for i in range(len(yb)):
                g = bnn_mod.elbo_and_grad(model, (Xb[i : i + 1], yb[i : i + 1]))[1]
                if not kl:
                    g = g - _bnn_kl_grad(model)
                out.append(g)
            return np.stack(out)

        return dim, mean_grad, None, lambda b: per_instance(b, True), lambda b: per_instance(b, False)

    lo, hi = model.last_layer_mean_range
    dim = hi - lo

    def mean_grad(d, rows=None):
        Xs, ys = (X, y) if rows is None else (X[rows], y[rows])
        th = theta.copy()
        th[lo:hi] += d
        return bnn_mod.bnn_last_layer_grads(model.with_theta(th), (Xs, ys), kl=True).mean(axis=0)

    return (
        dim,
        mean_grad,
        None,
        lambda b: bnn_mod.bnn_last_layer_grads(model, b, kl=True),
        lambda b: bnn_mod.bnn_last_layer_grads(model, b, kl=False),
    )


def _bnn_kl_grad(model) -> np.ndarray:
    mu, lv = model.means.values, model.logvars.values
    return model.kl_weight * np.concatenate([mu, 0.5 * (np.exp(lv) - 1.0)])


def dense_hessian(op: HessianOperator, max_dim: int = 2000) -> np.ndarray:
    """Materialize ``H + damping*I`` one basis column at a time."""
    if op.dim > max_dim:
        raise ValueError(f"scope dimension {op.dim} exceeds the dense limit {max_dim}")
    out = np.empty((op.dim, op.dim))
    e = np.zeros(op.dim)
    for i in range(op.dim):
        e[i] = 1.0
        out[:, i] = op.hvp(e)
        e[i] = 0.0
    return out


@dataclass(frozen=True)
class EigenResult:
    value: float
    vector: np.ndarray
    converged: bool
    iterations: int


def top_eigenvalue(op: HessianOperator, max_iters: int = 1000, tol: float = 1e-6, stream: RngStream | None = None) -> EigenResult:
    """Power iteration on the undamped Hessian.

    Stops when successive Rayleigh quotients agree to ``tol`` relative. A
    non-converged run still returns its last estimate with ``converged=False``.
    """
    if op.dim < 1:
        raise ValueError("operator has no dimensions")
    stream = stream or RngStream(0)
    v = stream.normal(op.dim)
    v /= np.linalg.norm(v)
    prev = None
    for it in range(1, max_iters + 1):
        w = op.undamped_hvp(v)
        lam = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return EigenResult(0.0, v, True, it)
        v = w / nw
        if prev is not None and abs(lam - prev) <= tol * abs(lam):
            lam = float(v @ op.undamped_hvp(v))
            return EigenResult(lam, v, True, it)
        prev = lam
    return EigenResult(lam, v, False, max_iters)


@dataclass(frozen=True)
class LissaConfig:
    recursion_depth: int = 5000
    scale: float | None = None
    repeats: int = 4
    convergence_tol: float = 1e-10
    batch_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.scale is not None and self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.recursion_depth < 1 or self.repeats < 1:
            raise ValueError("recursion_depth and repeats must be positive")


@dataclass(frozen=True)
class LissaResult:
    x: np.ndarray
    residual: float
    scale: float
    iterations: int


def lissa_inverse_hvp(op: HessianOperator, b, cfg: LissaConfig = LissaConfig()) -> LissaResult:
    """Stochastic Neumann-series estimate of ``(H + damping*I)^{-1} b``.

    Each repeat runs ``x <- b + (I - s (H + damping*I)) x`` and the answer is
    ``s`` times the repeat average. With ``batch_size=None`` every product
    uses the full training set and the recursion is deterministic.
    """
    b = np.asarray(b, dtype=np.float64)
    nb = np.linalg.norm(b)
    if nb == 0.0:
        return LissaResult(np.zeros_like(b), 0.0, cfg.scale or 1.0, 0)
    scale = cfg.scale
    if scale is None:
        est = top_eigenvalue(op, max_iters=200, tol=1e-4, stream=RngStream(cfg.seed).split(7)).value + op.damping
        scale = 0.9 / max(abs(est), 1e-12)
    base = RngStream(cfg.seed)
    n = op.n_train
    total = np.zeros_like(b)
    iters = 0
    for r in range(cfg.repeats):
        stream = base.split(r)
        x = b.copy()
        last, rising = np.inf, 0
        for j in range(cfg.recursion_depth):
            rows = None
            if cfg.batch_size is not None and n is not None and cfg.batch_size < n:
                rows = stream.integers(n, cfg.batch_size)
            step = b - scale * (op.raw_hvp(x, rows) + op.damping * x)
            x = x + step
            res = np.linalg.norm(step) / nb
            iters = max(iters, j + 1)
            if not np.isfinite(res):
                raise LissaDivergence("diverging; reduce scale")
            rising = rising + 1 if res > last else 0
            if rising >= 10:
                raise LissaDivergence("diverging; reduce scale")
            last = res
            if res <= cfg.convergence_tol:
                break
        total += x
        if cfg.batch_size is None:
            total *= cfg.repeats
            break
    y = scale * total / cfg.repeats
    residual = float(np.linalg.norm(op.hvp(y) - b) / nb)
    return LissaResult(y, residual, scale, iters)


def inverse_hvp(
    op: HessianOperator,
    b,
    method: str = "direct_solve",
    lissa: LissaConfig | None = None,
    indefinite: str = "raise",
) -> tuple[np.ndarray, float]:
    """``(H + damping*I)^{-1} b`` and the relative residual of the answer.

    The direct solve factors with Cholesky. If that fails and
    ``indefinite="symmetric_solve"``, a symmetric-indefinite (LDL^T) solve
    is used instead of raising :class:`NotPositiveDefiniteError`.
    """
    b = np.asarray(b, dtype=np.float64)
    if method == "direct_solve":
        A = op.dense()
        try:
            x = solve_spd(A, b)
        except NotPositiveDefiniteError:
            if indefinite != "symmetric_solve":
                raise
            x = scipy.linalg.solve(A, b, assume_a="sym")
        nb = np.linalg.norm(b)
        return x, float(np.linalg.norm(A @ x - b) / nb) if nb else 0.0
    if method == "lissa":
        res = lissa_inverse_hvp(op, b, lissa or LissaConfig())
        return res.x, res.residual
    raise ValueError(f"unknown solve method {method!r}")


def influence_up_params(op: HessianOperator, z, method: str = "direct_solve", lissa: LissaConfig | None = None) -> np.ndarray:
    """Parameter influence of up-weighting ``z``: ``-(H + damping*I)^{-1} grad L(z)``."""
    g = op.train_gradients(z)[0]
    return -inverse_hvp(op, g, method, lissa)[0]


@dataclass(frozen=True)
class InfluenceRecord:
    train_index: int
    test_index: int
    i_up_loss: float
    method: str
    epsilon: float
    scope: str
    residual: float = 0.0

    @property
    def approx_loss_diff(self) -> float:
        """Predicted test-loss change from removing the training point: ``epsilon * i_up_loss``."""
        return self.epsilon * self.i_up_loss

    def row(self) -> dict:
        return {
            "train_index": self.train_index,
            "test_index": self.test_index,
            "i_up_loss": repr(self.i_up_loss),
            "approx_loss_diff": repr(self.approx_loss_diff),
            "method": self.method,
            "epsilon": repr(self.epsilon),
            "scope": self.scope,
            "residual": repr(self.residual),
        }


INFLUENCE_CSV_FIELDS = ["train_index", "test_index", "i_up_loss", "approx_loss_diff", "method", "epsilon", "scope", "residual"]


def _epsilon(op: HessianOperator) -> float:
    if not op.n_train:
        raise ValueError("operator does not know its training-set size")
    return -1.0 / op.n_train


def influence_up_loss(
    op: HessianOperator,
    z,
    z_test,
    method: str = "direct_solve",
    lissa: LissaConfig | None = None,
    train_index: int = -1,
    test_index: int = -1,
) -> InfluenceRecord:
    """``-grad L(z_test)^T (H + damping*I)^{-1} grad L(z)``."""
    g = op.train_gradients(z)[0]
    x, residual = inverse_hvp(op, g, method, lissa)
    val = -float(op.test_gradient(z_test) @ x)
    return InfluenceRecord(train_index, test_index, val, method, _epsilon(op), op.scope, residual)


def influence_scores(
    op: HessianOperator,
    train: Dataset,
    z_test: LabeledInstance,
    method: str = "direct_solve",
    lissa: LissaConfig | None = None,
    test_index: int = -1,
    indefinite: str = "raise",
) -> list[InfluenceRecord]:
    """Influence of every training point on one test point, from a single inverse-HVP.

    Solves ``(H + damping*I) s = grad L(z_test)`` once and returns
    ``-s^T grad L(z_i)`` per training point; the damped Hessian is symmetric,
    so this equals the per-point form.
    """
    s_test, residual = inverse_hvp(op, op.test_gradient(z_test), method, lissa, indefinite)
    G = op.train_gradients(train)
    vals = -(G @ s_test)
    eps = _epsilon(op)
    return [
        InfluenceRecord(int(train.index[i]), test_index, float(v), method, eps, op.scope, residual)
        for i, v in enumerate(vals)
    ]


def write_influence_csv(records: list[InfluenceRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=INFLUENCE_CSV_FIELDS)
        w.writeheader()
        for r in records:
            w.writerow(r.row())
