"""Optimizers, learning-rate plateau schedule, SWA and the training loops."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import bnn as bnn_mod
from . import mlp as mlp_mod
from .data import Dataset, LabeledInstance, as_arrays
from .linalg import RngStream

__all__ = [
    "TrainConfig",
    "TrainLog",
    "TrainingDiverged",
    "AdamState",
    "adam_step",
    "PlateauScheduler",
    "SwaState",
    "swa_update",
    "train",
    "finetune_last_layer",
    "finetune_removals",
    "FinetuneResult",
    "LastLayerProblem",
    "newton_minimize",
    "objective",
    "probe_loss",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"diverged at epoch {epoch}")


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 60_000
    batch_size: int | None = None
    plateau_patience: int = 100
    plateau_factor: float = 0.1
    min_lr: float = 1e-7
    swa: bool = False
    swa_start_epoch: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("gd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @property
    def swa_start(self) -> int:
        if self.swa_start_epoch is not None:
            return self.swa_start_epoch
        return int(0.75 * self.epochs)


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    lr_events: list[tuple[int, float]] = field(default_factory=list)
    probe_losses: list[float] | None = None
    wall_time: float = 0.0
    swa_snapshots: int = 0

    @property
    def final_epoch(self) -> int:
        return len(self.losses)

    @property
    def final_lr(self) -> float | None:
        return self.lrs[-1] if self.lrs else None

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["epoch", "loss", "lr"]
        if self.probe_losses is not None:
            head.append("probe_test_loss")
        w.writerow(head)
        for e, (loss, lr) in enumerate(zip(self.losses, self.lrs)):
            row = [e, repr(loss), repr(lr)]
            if self.probe_losses is not None:
                row.append(repr(self.probe_losses[e]))
            w.writerow(row)
        return buf.getvalue()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.csv_text())


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def fresh(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> tuple[np.ndarray, AdamState]:
    if params.shape != grad.shape or grad.shape != state.m.shape:
        raise ValueError("parameter, gradient and state shapes differ")
    t = state.t + 1
    m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grad
    v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grad * grad
    mhat = m / (1.0 - ADAM_BETA1**t)
    vhat = v / (1.0 - ADAM_BETA2**t)
    return params - lr * mhat / (np.sqrt(vhat) + ADAM_EPS), AdamState(m, v, t)


class PlateauScheduler:
    """Multiply the rate by ``factor`` after ``patience`` epochs without a new strict minimum."""

    def __init__(self, lr: float, patience: int, factor: float, min_lr: float, threshold: float = 1e-12):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.threshold = threshold
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, loss: float) -> float | None:
        """Feed one epoch's loss; returns the new rate when it changes."""
        if loss < self.best - self.threshold:
            self.best = loss
            self.bad_epochs = 0
            return None
        self.bad_epochs += 1
        if self.bad_epochs < self.patience:
            return None
        self.bad_epochs = 0
        new = max(self.lr * self.factor, self.min_lr)
        if new >= self.lr:
            return None
        self.lr = new
        return new


@dataclass(frozen=True)
class SwaState:
    mean: np.ndarray | None = None
    count: int = 0


def swa_update(state: SwaState, params) -> SwaState:
    values = params.values if hasattr(params, "values") else np.asarray(params, dtype=np.float64)
    if state.mean is None:
        return SwaState(values.astype(np.float64, copy=True), 1)
    if state.mean.shape != values.shape:
        raise ValueError(f"SWA layout mismatch: {state.mean.shape} vs {values.shape}")
    return SwaState(state.mean + (values - state.mean) / (state.count + 1), state.count + 1)


def objective(model, X: np.ndarray, y: np.ndarray, l2: float) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
    """``theta -> (loss, grad)`` for the model's training objective.

    Variational models regularize through their KL term, so ``l2`` only
    applies to deterministic networks.
    """
    if model.kind == "mlp":
        arch = model.arch
        return lambda th: mlp_mod._loss_grad(arch, th, X, y, l2)
    return lambda th: bnn_mod.elbo_and_grad(model.with_theta(th), (X, y))


def probe_loss(model, z: LabeledInstance) -> float:
    """Unregularized loss of a single instance (cross-entropy or Gaussian NLL)."""
    if model.kind == "mlp":
        return float(mlp_mod.per_instance_loss(model, z)[0])
    return float(bnn_mod.per_instance_nll(model, z)[0])


def _run(theta, fun, n_epochs, cfg: TrainConfig, batches=None, probe=None, mask=None, record_swa=True):
    log = TrainLog(probe_losses=[] if probe is not None else None)
    sched = PlateauScheduler(cfg.lr, cfg.plateau_patience, cfg.plateau_factor, cfg.min_lr)
    state = AdamState.fresh(theta.shape[0])
    swa = SwaState()
    use_swa = cfg.swa and record_swa
    t0 = time.perf_counter()
    for epoch in range(n_epochs):
        lr = sched.lr
        if batches is None:
            f, g = fun(theta, None)
            if not np.isfinite(f):
                raise TrainingDiverged(epoch)
            if mask is not None:
                g = g * mask
            if cfg.optimizer == "adam":
                theta, state = adam_step(theta, g, state, lr)
            else:
                theta = theta - lr * g
            epoch_loss = f
        else:
            total = 0.0
            parts = batches(epoch)
            for rows in parts:
                f, g = fun(theta, rows)
                if not np.isfinite(f):
                    raise TrainingDiverged(epoch)
                if mask is not None:
                    g = g * mask
                if cfg.optimizer == "adam":
                    theta, state = adam_step(theta, g, state, lr)
                else:
                    theta = theta - lr * g
                total += f * len(rows)
            epoch_loss = total / sum(len(r) for r in parts)
        if not math.isfinite(theta.sum()):
            raise TrainingDiverged(epoch)
        log.losses.append(float(epoch_loss))
        log.lrs.append(lr)
        new_lr = sched.step(epoch_loss)
        if new_lr is not None:
            log.lr_events.append((epoch, new_lr))
        if use_swa and epoch >= cfg.swa_start:
            swa = swa_update(swa, theta)
        if probe is not None:
            log.probe_losses.append(probe(theta))
    if use_swa and swa.count:
        theta = swa.mean
        log.swa_snapshots = swa.count
    log.wall_time = time.perf_counter() - t0
    return theta, log


def _minibatches(n: int, cfg: TrainConfig):
    if cfg.batch_size is None or cfg.batch_size >= n:
        return None
    stream = RngStream(cfg.seed).split(0xBA7C)

    def batches(epoch):
        order = stream.permutation(n)
        return [order[i : i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]

    return batches


def train(model, train_set: Dataset, cfg: TrainConfig, probe: LabeledInstance | None = None):
    """Train all parameters for ``cfg.epochs`` epochs; returns ``(model, TrainLog)``."""
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    X, y = train_set.X, train_set.y
    full = objective(model, X, y, cfg.weight_decay)
    batches = _minibatches(len(y), cfg)
    if batches is None:
        fun = lambda th, rows: full(th)
    else:
        fun = lambda th, rows: objective(model, X[rows], y[rows], cfg.weight_decay)(th)
    probe_fn = None
    if probe is not None:
        probe_fn = lambda th: probe_loss(model.with_theta(th), probe)
    theta, log = _run(model.theta.copy(), fun, cfg.epochs, cfg, batches, probe_fn)
    return model.with_theta(theta), log


def finetune_last_layer(model, reduced_train: Dataset, epochs: int, cfg: TrainConfig, probe: LabeledInstance | None = None):
    """Update only the final affine layer (weight means for variational models).

    Adam restarts from a fresh state at ``cfg.lr``. The lower layers are
    frozen, so their outputs are computed once and reused every epoch.
    """
    problem = LastLayerProblem(model, reduced_train.X, reduced_train.y, cfg.weight_decay)
    weights = np.full((1, len(reduced_train)), 1.0 / len(reduced_train))
    w, logs, diverged = _run_batched(problem, weights, epochs, cfg, probe)
    if diverged[0] is not None:
        raise TrainingDiverged(diverged[0])
    return problem.model_with(w[0]), logs[0]


@dataclass
class FinetuneResult:
    removed_index: int
    model: object | None
    log: TrainLog
    diverged_at: int | None = None


def finetune_removals(model, train_set: Dataset, removed: list[int], epochs: int, cfg: TrainConfig, probe: LabeledInstance | None = None) -> list[FinetuneResult]:
    """Leave-one-out fine-tuning of the final layer for every index in ``removed``.

    All removals run as one batch sharing the frozen features; each row has
    its own Adam state and plateau schedule, so the result matches running
    :func:`finetune_last_layer` on each reduced set separately.
    """
    problem = LastLayerProblem(model, train_set.X, train_set.y, cfg.weight_decay)
    n = len(train_set)
    weights = np.full((len(removed), n), 1.0 / (n - 1))
    weights[np.arange(len(removed)), removed] = 0.0
    w, logs, diverged = _run_batched(problem, weights, epochs, cfg, probe)
    out = []
    for j, r in enumerate(removed):
        m = None if diverged[j] is not None else problem.model_with(w[j])
        out.append(FinetuneResult(int(r), m, logs[j], diverged[j]))
    return out


class LastLayerProblem:
    """Final-layer objective with frozen lower layers, evaluated for a batch of weight rows.

    ``value_and_grad(w, C)`` takes ``J`` parameter rows and a ``J x n``
    matrix of per-instance weights and returns ``J`` objective values and
    gradients: ``sum_i C[j, i] * loss_i(w_j) + regularizer(w_j)``.
    """

    def __init__(self, model, X: np.ndarray, y: np.ndarray, l2: float = 0.0):
        self.model = model
        self.y = y
        self.rows = np.arange(len(y))
        k = model.arch.n_out
        if model.kind == "mlp":
            lo, hi = model.params.last_layer_range
            self.H = mlp_mod.features(model, X)
            self.HT = np.ascontiguousarray(self.H.T)
            self.l2 = l2
            rest = np.concatenate([model.theta[:lo], model.theta[hi:]])
            self.const = 0.5 * l2 * float(rest @ rest)
        else:
            lo, hi = model.last_layer_mean_range
            _, cache, _, _ = bnn_mod._forward(model, X)
            self.H, self.Hv = cache[-1][0], cache[-1][1]
            s = model.means.layout[-1]
            self.Wv = np.exp(model.logvars.values[s.w_slice]).reshape(s.fan_out, s.fan_in)
            self.bv = np.exp(model.logvars.values[s.b_slice])
            self.Y = np.zeros((len(y), k))
            self.Y[self.rows, y] = 1.0
            mu = model.means.values
            self.l2 = model.kl_weight
            rest = np.concatenate([mu[:lo], mu[hi:]])
            self.const = model.kl_weight * (
                0.5 * float(rest @ rest) + 0.5 * float(np.sum(np.exp(model.logvars.values) - 1.0 - model.logvars.values))
            )
        self.lo, self.hi = lo, hi
        self.k = k
        self.m = self.H.shape[1]

    @property
    def start(self) -> np.ndarray:
        return self.model.theta[self.lo : self.hi].copy()

    def _split(self, w):
        J = w.shape[0]
        return w[:, : self.k * self.m].reshape(J, self.k, self.m), w[:, self.k * self.m :]

    def value_and_grad(self, w: np.ndarray, C: np.ndarray):
        W, b = self._split(w)
        reg = 0.5 * self.l2 * (w * w).sum(axis=1) + self.const
        J = w.shape[0]
        if self.model.kind == "mlp":
            Z = (W.reshape(J * self.k, self.m) @ self.HT).reshape(J, self.k, -1) + b[:, :, None]
            Z -= Z.max(axis=1, keepdims=True)
            E = np.exp(Z)
            S = E.sum(axis=1, keepdims=True)
            logp_y = Z[:, self.y, self.rows] - np.log(S[:, 0, :])
            f = -(C * logp_y).sum(axis=1) + reg
            R = E / S
            R[:, self.y, self.rows] -= 1.0
            R *= C[:, None, :]
            gW = R @ self.H
            gb = R.sum(axis=2)
        else:
            WT = W.transpose(0, 2, 1)
            mz = self.H @ WT + b[:, None, :]
            vz = self.Hv @ (self.Wv.T[None] + WT * WT) + (self.H * self.H) @ self.Wv.T + self.bv
            p = mlp_mod.softmax(mz)
            q = p * (1.0 - p)
            vy = q * q * vz
            terms = bnn_mod._nll_terms(p, vy, self.Y)[0].sum(axis=2)
            f = (C * terms).sum(axis=1) + reg
            gmz, gvz = bnn_mod._output_grads(p, vy, vz, self.Y, C[:, :, None])
            gW = gmz.transpose(0, 2, 1) @ self.H + 2.0 * W * (gvz.transpose(0, 2, 1) @ self.Hv)
            gb = gmz.sum(axis=1)
        g = np.concatenate([gW.reshape(w.shape[0], -1), gb], axis=1) + self.l2 * w
        return f, g

    def probe_loss(self, w: np.ndarray, z: LabeledInstance) -> np.ndarray:
        x = np.asarray(z.features, dtype=np.float64)[None, :]
        W, b = self._split(w)
        if self.model.kind == "mlp":
            h = mlp_mod.features(self.model, x)[0]
            return -mlp_mod.log_softmax(np.einsum("jkm,m->jk", W, h) + b)[:, z.label]
        _, cache, _, _ = bnn_mod._forward(self.model, x)
        h, hv = cache[-1][0][0], cache[-1][1][0]
        mz = np.einsum("jkm,m->jk", W, h) + b
        vz = np.einsum("jkm,m->jk", self.Wv[None] + W * W, hv) + self.Wv @ (h * h) + self.bv
        p = mlp_mod.softmax(mz)
        q = p * (1.0 - p)
        Y = np.zeros(self.k)
        Y[z.label] = 1.0
        return bnn_mod._nll_terms(p, q * q * vz, Y)[0].sum(axis=1)

    def model_with(self, w_row: np.ndarray):
        theta = self.model.theta.copy()
        theta[self.lo : self.hi] = w_row
        return self.model.with_theta(theta)


def _run_batched(problem: LastLayerProblem, C: np.ndarray, epochs: int, cfg: TrainConfig, probe=None):
    """Adam or GD on ``J`` independent rows with per-row plateau schedules."""
    J = C.shape[0]
    w = np.tile(problem.start, (J, 1))
    mom = np.zeros_like(w)
    vel = np.zeros_like(w)
    lr = np.full(J, float(cfg.lr))
    best = np.full(J, np.inf)
    bad = np.zeros(J, dtype=np.int64)
    alive = np.ones(J, dtype=bool)
    diverged: list[int | None] = [None] * J
    losses = np.empty((epochs, J))
    lrs = np.empty((epochs, J))
    probes = np.empty((epochs, J)) if probe is not None else None
    events: list[list[tuple[int, float]]] = [[] for _ in range(J)]
    t0 = time.perf_counter()
    for epoch in range(epochs):
        f, g = problem.value_and_grad(w, C)
        bad_rows = alive & ~(np.isfinite(f) & np.isfinite(g).all(axis=1))
        for j in np.flatnonzero(bad_rows):
            diverged[j] = epoch
        alive &= ~bad_rows
        g = np.where(alive[:, None], g, 0.0)
        step_lr = np.where(alive, lr, 0.0)[:, None]
        if cfg.optimizer == "adam":
            t = epoch + 1
            mom = ADAM_BETA1 * mom + (1.0 - ADAM_BETA1) * g
            vel = ADAM_BETA2 * vel + (1.0 - ADAM_BETA2) * g * g
            mhat = mom / (1.0 - ADAM_BETA1**t)
            vhat = vel / (1.0 - ADAM_BETA2**t)
            w = w - step_lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
        else:
            w = w - step_lr * g
        losses[epoch] = f
        lrs[epoch] = lr
        improved = f < best - 1e-12
        best = np.where(improved, f, best)
        bad = np.where(improved, 0, bad + 1)
        cut = alive & (bad >= cfg.plateau_patience)
        bad[cut] = 0
        for j in np.flatnonzero(cut):
            new = max(lr[j] * cfg.plateau_factor, cfg.min_lr)
            if new < lr[j]:
                lr[j] = new
                events[j].append((epoch, new))
        if probes is not None:
            probes[epoch] = problem.probe_loss(w, probe)
    wall = time.perf_counter() - t0
    logs = []
    for j in range(J):
        stop = epochs if diverged[j] is None else diverged[j]
        logs.append(
            TrainLog(
                losses=losses[:stop, j].tolist(),
                lrs=lrs[:stop, j].tolist(),
                lr_events=events[j],
                probe_losses=None if probes is None else probes[:stop, j].tolist(),
                wall_time=wall / J,
            )
        )
    return w, logs, diverged


def newton_minimize(fun_grad, hess, x0: np.ndarray, tol: float = 1e-10, max_iter: int = 100):
    """Damped Newton with backtracking for smooth strongly convex objectives.

    Returns ``(x, grad_norm, converged)``. Starting at a point whose gradient
    already meets ``tol`` returns ``x0`` unchanged.
    """
    x = np.array(x0, dtype=np.float64)
    f, g = fun_grad(x)
    for _ in range(max_iter):
        gn = float(np.linalg.norm(g))
        if gn < tol:
            return x, gn, True
        step = np.linalg.solve(hess(x), g)
        t = 1.0
        while True:
            x_new = x - t * step
            f_new, g_new = fun_grad(x_new)
            armijo = f_new <= f - 1e-4 * t * float(g @ step)
            if armijo or np.linalg.norm(g_new) < 0.5 * gn or t < 1e-10:
                break
            t *= 0.5
        if f_new > f and float(np.linalg.norm(g_new)) >= gn:
            return x, gn, False
        x, f, g = x_new, f_new, g_new
    gn = float(np.linalg.norm(g))
    return x, gn, gn < tol


def with_lr(cfg: TrainConfig, lr: float) -> TrainConfig:
    return replace(cfg, lr=lr)
