"""Leave-one-out ground truth: point selection, retraining, reports and the Taylor check."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bnn as bnn_mod
from . import mlp as mlp_mod
from .checkpoint import atomic_write_text
from .data import Dataset, LabeledInstance, split, standardize
from .influence import HessianOperator, LissaConfig, influence_scores
from .linalg import RngStream
from .stats import UndefinedCorrelation, pearson, spearman
from .training import (
    LastLayerProblem,
    TrainConfig,
    TrainingDiverged,
    _run_batched,
    finetune_removals,
    newton_minimize,
    probe_loss,
    train,
    with_lr,
)

__all__ = [
    "ModelSpec",
    "LooProtocol",
    "TrajectorySample",
    "LooRecord",
    "ValidationReport",
    "IncompleteReport",
    "per_instance_losses",
    "select_points",
    "true_loss_diff",
    "true_loss_diffs",
    "validation_run",
    "validation_repetitions",
    "prepare_split",
    "DerivationRow",
    "DerivationReport",
    "derivation_check",
    "derivation_check_quadratic",
]

# child-stream keys
INIT_KEY = 1
SPLIT_KEY = 2


class IncompleteReport(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """Everything needed to build and train one network from a seed."""

    family: str = "mlp"
    hidden_layers: int = 1
    hidden_width: int = 5
    activation: str = "relu"
    train: TrainConfig = field(default_factory=TrainConfig)
    init_logvar: float = -6.0
    kl_weight: float | None = None
    arm: str = "weight_decay"

    def __post_init__(self):
        if self.family not in ("mlp", "bnn"):
            raise ValueError(f"unknown model family {self.family!r}")

    def arch(self, n_in: int, n_out: int) -> mlp_mod.ArchSpec:
        width = self.hidden_width if self.hidden_layers else 0
        return mlp_mod.ArchSpec(n_in, self.hidden_layers, width, n_out, self.activation)

    @property
    def l2(self) -> float:
        return self.train.weight_decay if self.family == "mlp" else 0.0

    def build(self, n_in: int, n_out: int, n_train: int, seed: int):
        stream = RngStream(seed).split(INIT_KEY)
        arch = self.arch(n_in, n_out)
        if self.family == "mlp":
            return mlp_mod.build_mlp(arch, stream)
        kw = self.kl_weight if self.kl_weight is not None else 1.0 / n_train
        return bnn_mod.build_bnn(arch, stream, self.init_logvar, kw)

    def train_config(self, seed: int) -> TrainConfig:
        return replace(self.train, seed=seed)


@dataclass(frozen=True)
class LooProtocol:
    selection: str = "top_loss"
    k: int = 40
    retrain: str = "from_optimal"
    finetune_epochs: int = 7500
    finetune_lr: float | None = None
    test_point: str | int = "max_loss"
    repetitions: int = 1
    base_seed: int = 0
    damping: float = 0.01
    scope: str = "last_layer"
    solve_method: str = "direct_solve"
    lissa: LissaConfig | None = None
    indefinite: str = "symmetric_solve"

    def __post_init__(self):
        if self.indefinite not in ("raise", "symmetric_solve"):
            raise ValueError(f"unknown indefinite-Hessian policy {self.indefinite!r}")
        if self.selection not in ("top_loss", "top_influence"):
            raise ValueError(f"unknown selection {self.selection!r}")
        if self.retrain not in ("from_optimal", "from_scratch"):
            raise ValueError(f"unknown retrain mode {self.retrain!r}")
        if self.k < 1:
            raise ValueError("k must be positive")
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        if not (self.test_point == "max_loss" or (isinstance(self.test_point, int) and self.test_point >= 0)):
            raise ValueError("test_point must be 'max_loss' or a non-negative index")


@dataclass(frozen=True)
class TrajectorySample:
    epoch: int
    test_loss: float


@dataclass
class LooRecord:
    train_index: int
    approx_loss_diff: float
    true_loss_diff: float | None
    i_up_loss: float
    trajectory: list[float] = field(default_factory=list, repr=False)
    reason: str | None = None

    @property
    def ok(self) -> bool:
        return self.reason is None

    def samples(self) -> list[TrajectorySample]:
        return [TrajectorySample(e, v) for e, v in enumerate(self.trajectory)]


@dataclass
class ValidationReport:
    records: list[LooRecord]
    spearman: float | None
    pearson: float | None
    epsilon: float
    seed: int
    test_index: int
    test_loss: float
    model: dict
    protocol: dict
    train_grad_norm: float = 0.0
    correlation_error: str | None = None
    hessian_positive_definite: bool | None = None
    influences: list = field(default_factory=list, repr=False)

    @property
    def included(self) -> list[LooRecord]:
        return [r for r in self.records if r.ok]

    @property
    def excluded(self) -> list[LooRecord]:
        return [r for r in self.records if not r.ok]

    def approx(self) -> np.ndarray:
        return np.array([r.approx_loss_diff for r in self.included])

    def true(self) -> np.ndarray:
        return np.array([r.true_loss_diff for r in self.included])

    def to_dict(self, trajectories: bool = False) -> dict:
        recs = []
        for r in self.records:
            d = {
                "train_index": r.train_index,
                "approx_loss_diff": r.approx_loss_diff,
                "true_loss_diff": r.true_loss_diff,
                "i_up_loss": r.i_up_loss,
                "reason": r.reason,
            }
            if trajectories:
                d["trajectory"] = r.trajectory
            recs.append(d)
        return {
            "records": recs,
            "spearman": self.spearman,
            "pearson": self.pearson,
            "correlation_error": self.correlation_error,
            "epsilon": self.epsilon,
            "seed": self.seed,
            "test_index": self.test_index,
            "test_loss": self.test_loss,
            "train_grad_norm": self.train_grad_norm,
            "hessian_positive_definite": self.hessian_positive_definite,
            "model": self.model,
            "protocol": self.protocol,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False)

    @classmethod
    def from_dict(cls, d: dict) -> "ValidationReport":
        recs = [
            LooRecord(r["train_index"], r["approx_loss_diff"], r["true_loss_diff"], r["i_up_loss"], r.get("trajectory", []), r["reason"])
            for r in d["records"]
        ]
        return cls(
            recs,
            d["spearman"],
            d["pearson"],
            d["epsilon"],
            d["seed"],
            d["test_index"],
            d["test_loss"],
            d["model"],
            d["protocol"],
            d.get("train_grad_norm", 0.0),
            d.get("correlation_error"),
            d.get("hessian_positive_definite"),
        )

    @classmethod
    def from_json(cls, text: str) -> "ValidationReport":
        return cls.from_dict(json.loads(text))

    def write_trajectories(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for r in self.records:
            if not r.trajectory:
                continue
            p = directory / f"removal_{r.train_index:05d}.csv"
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["epoch", "test_loss"])
            w.writerows([e, repr(float(v))] for e, v in enumerate(r.trajectory))
            atomic_write_text(p, buf.getvalue())
            paths.append(p)
        return paths


def per_instance_losses(model, ds: Dataset) -> np.ndarray:
    """Unregularized per-instance loss (cross-entropy, or Gaussian NLL for variational nets)."""
    if model.kind == "mlp":
        return mlp_mod.per_instance_loss(model, ds)
    return bnn_mod.per_instance_nll(model, ds)


def _top_k(scores: np.ndarray, k: int) -> list[int]:
    # stable sort on the negated score keeps lower indices first among ties
    return [int(i) for i in np.argsort(-scores, kind="stable")[:k]]


def select_points(model, train: Dataset, influences: Sequence[float] | None, selection: str, k: int) -> list[int]:
    """Row positions of the ``k`` selected training points, best first, ties to the lower index."""
    n = len(train)
    if k > n:
        raise ValueError(f"k={k} exceeds the training-set size {n}")
    if selection == "top_loss":
        return _top_k(per_instance_losses(model, train), k)
    if selection == "top_influence":
        if influences is None or len(influences) != n:
            raise ValueError("top_influence selection needs an influence value for every training point")
        return _top_k(np.abs(np.asarray(influences, dtype=np.float64)), k)
    raise ValueError(f"unknown selection {selection!r}")


def _scratch_one(args):
    spec, seed, n_in, n_out, train_set, removed, z_test, cfg = args
    model = spec.build(n_in, n_out, len(train_set) - 1, seed)
    try:
        trained, log = train(model, train_set.without(removed), cfg, z_test)
    except TrainingDiverged as exc:
        return None, [], f"diverged at epoch {exc.epoch}"
    return trained, log.probe_losses, None



def true_loss_diffs(
    model,
    train: Dataset,
    removed: Sequence[int],
    z_test: LabeledInstance,
    protocol: LooProtocol,
    spec: ModelSpec,
    seed: int,
    cfg: TrainConfig,
    final_lr: float | None = None,
    workers: int = 1,
) -> list[tuple[float | None, list[float], str | None]]:
    """``(delta, trajectory, reason)`` for every removed row position.

    ``delta = L(z_test, retrained) - L(z_test, model)``. Trajectories hold the
    test loss at epoch 0 (the starting point) and after every epoch.
    """
    base = probe_loss(model, z_test)
    removed = [int(r) for r in removed]
    out = []
    if protocol.retrain == "from_optimal":
        lr = protocol.finetune_lr if protocol.finetune_lr is not None else (final_lr if final_lr is not None else cfg.lr)
        results = finetune_removals(model, train, removed, protocol.finetune_epochs, with_lr(cfg, lr), z_test)
        for res in results:
            if res.model is None:
                out.append((None, [base] + res.log.probe_losses, f"diverged at epoch {res.diverged_at}"))
            else:
                out.append((probe_loss(res.model, z_test) - base, [base] + res.log.probe_losses, None))
        return out

    # from_scratch: same seed, so the removed point is the only difference
    fresh = spec.build(train.n_features, train.n_classes, len(train) - 1, seed)
    start = probe_loss(fresh, z_test)
    if model.kind == "mlp" and model.arch.hidden_layers == 0 and cfg.batch_size is None and not cfg.swa:
        # depth-0 networks are all last layer: retrain every removal as one batch
        problem = LastLayerProblem(fresh, train.X, train.y, spec.l2)
        n = len(train)
        C = np.full((len(removed), n), 1.0 / (n - 1))
        C[np.arange(len(removed)), removed] = 0.0
        w, logs, diverged = _run_batched(problem, C, cfg.epochs, cfg, z_test)
        for j in range(len(removed)):
            traj = [start] + logs[j].probe_losses
            if diverged[j] is not None:
                out.append((None, traj, f"diverged at epoch {diverged[j]}"))
            else:
                out.append((probe_loss(problem.model_with(w[j]), z_test) - base, traj, None))
        return out

    jobs = [(spec, seed, train.n_features, train.n_classes, train, r, z_test, cfg) for r in removed]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_scratch_one, jobs))
    else:
        results = [_scratch_one(j) for j in jobs]
    for trained, traj, reason in results:
        if reason is not None:
            out.append((None, [start] + list(traj or []), reason))
        else:
            out.append((probe_loss(trained, z_test) - base, [start] + traj, None))
    return out


def true_loss_diff(model, train: Dataset, removed_index: int, z_test: LabeledInstance, protocol: LooProtocol, spec: ModelSpec, seed: int, cfg: TrainConfig, final_lr: float | None = None):
    """Single-removal form of :func:`true_loss_diffs`; returns ``(delta, trajectory)``."""
    delta, traj, reason = true_loss_diffs(model, train, [removed_index], z_test, protocol, spec, seed, cfg, final_lr)[0]
    if reason is not None:
        raise TrainingDiverged(int(reason.rsplit(" ", 1)[-1]))
    return delta, [TrajectorySample(e, v) for e, v in enumerate(traj)]


def _model_meta(model, spec: ModelSpec) -> dict:
    a = model.arch
    meta = {
        "family": spec.family,
        "arm": spec.arm,
        "n_in": a.n_in,
        "hidden_layers": a.hidden_layers,
        "hidden_width": a.hidden_width,
        "n_out": a.n_out,
        "activation": a.activation,
        "weight_decay": spec.train.weight_decay,
        "swa": spec.train.swa,
    }
    if model.kind == "bnn":
        meta["kl_weight"] = model.kl_weight
    return meta


def validation_run(
    protocol: LooProtocol,
    spec: ModelSpec,
    train_set: Dataset,
    test_set: Dataset,
    seed: int,
    trained: tuple | None = None,
    workers: int = 1,
) -> ValidationReport:
    """Train (unless ``trained=(model, final_lr)`` is given), estimate and measure LOO loss changes."""
    cfg = spec.train_config(seed)
    if trained is None:
        model = spec.build(train_set.n_features, train_set.n_classes, len(train_set), seed)
        model, log = train(model, train_set, cfg)
        final_lr = log.final_lr
    else:
        model, final_lr = trained
    if protocol.k > len(train_set):
        raise ValueError(f"k={protocol.k} exceeds the training-set size {len(train_set)}")

    test_losses = per_instance_losses(model, test_set)
    ti = int(np.argmax(test_losses)) if protocol.test_point == "max_loss" else int(protocol.test_point)
    z_test = test_set[ti]

    op = HessianOperator.for_model(model, train_set, protocol.damping, protocol.scope, l2=spec.l2)
    scores = influence_scores(op, train_set, z_test, protocol.solve_method, protocol.lissa, int(test_set.index[ti]), protocol.indefinite)
    pd = op.is_positive_definite() if op.dim <= 2000 else None
    i_up = np.array([r.i_up_loss for r in scores])
    chosen = select_points(model, train_set, i_up, protocol.selection, protocol.k)
    eps = scores[0].epsilon

    truths = true_loss_diffs(model, train_set, chosen, z_test, protocol, spec, seed, cfg, final_lr, workers)
    records = []
    for row, (delta, traj, reason) in zip(chosen, truths):
        approx = eps * float(i_up[row])
        if reason is None and not math.isfinite(delta):
            delta, reason = None, "non-finite loss difference"
        records.append(LooRecord(int(train_set.index[row]), approx, delta, float(i_up[row]), traj, reason))

    ok = [r for r in records if r.ok]
    if len(ok) < 0.9 * len(records):
        raise IncompleteReport(f"only {len(ok)} of {len(records)} removals succeeded")
    rho = r_p = None
    err = None
    if len(ok) >= 2:
        a = [r.approx_loss_diff for r in ok]
        t = [r.true_loss_diff for r in ok]
        try:
            rho, r_p = spearman(a, t), pearson(a, t)
        except UndefinedCorrelation as exc:
            err = str(exc)
    else:
        err = "fewer than two records"
    proto = asdict(protocol)
    proto["lissa"] = None if protocol.lissa is None else asdict(protocol.lissa)
    proto["finetune_lr_used"] = protocol.finetune_lr if protocol.finetune_lr is not None else final_lr
    return ValidationReport(
        records,
        rho,
        r_p,
        eps,
        seed,
        int(test_set.index[ti]),
        float(test_losses[ti]),
        _model_meta(model, spec),
        proto,
        op.gradient_norm(),
        err,
        pd,
        scores,
    )


def prepare_split(ds: Dataset, test_fraction: float, seed: int, scale: bool = True) -> tuple[Dataset, Dataset]:
    """Stratified split drawn from the repetition seed, then train-set standardization."""
    tr, te = split(ds, test_fraction, RngStream(seed).split(SPLIT_KEY))
    if scale:
        tr, (te,), _ = standardize(tr, [te])
    return tr, te


def validation_repetitions(protocol: LooProtocol, spec: ModelSpec, ds: Dataset, test_fraction: float = 0.2, scale: bool = True) -> list[ValidationReport]:
    """Repetition ``r`` uses seed ``base_seed + r`` for the split and the initialization."""
    reports = []
    for r in range(protocol.repetitions):
        seed = protocol.base_seed + r
        tr, te = prepare_split(ds, test_fraction, seed, scale)
        reports.append(validation_run(protocol, spec, tr, te, seed))
    return reports


@dataclass(frozen=True)
class DerivationRow:
    epsilon: float
    error: float
    delta_norm: float
    converged: bool


@dataclass(frozen=True)
class DerivationReport:
    rows: list[DerivationRow]
    base_grad_norm: float

    @property
    def ratios(self) -> list[float]:
        """``error(eps) / error(eps/2)`` for consecutive rows whose epsilon halves."""
        out = []
        for a, b in zip(self.rows, self.rows[1:]):
            if b.epsilon and math.isclose(a.epsilon / b.epsilon, 2.0) and b.error > 0:
                out.append(a.error / b.error)
        return out

    @property
    def converged(self) -> bool:
        return self.base_grad_norm < 1e-10 and all(r.converged for r in self.rows)


def _derivation(fg_R, hess_R, g_L, fg_L, hess_L, x0, epsilons) -> DerivationReport:
    theta, gn, ok0 = newton_minimize(fg_R, hess_R, x0)
    H = hess_R(theta)
    direction = -np.linalg.solve(H, g_L(theta))
    rows = []
    for eps in epsilons:
        if eps == 0:
            rows.append(DerivationRow(0.0, 0.0, 0.0, ok0))
            continue

        def fg(th, e=eps):
            f1, g1 = fg_R(th)
            f2, g2 = fg_L(th)
            return f1 + e * f2, g1 + e * g2

        th_eps, gn_eps, ok = newton_minimize(fg, lambda th, e=eps: hess_R(th) + e * hess_L(th), theta)
        delta = th_eps - theta
        rows.append(DerivationRow(float(eps), float(np.linalg.norm(delta - eps * direction)), float(np.linalg.norm(delta)), ok and gn_eps < 1e-10))
    return DerivationReport(rows, gn)


def derivation_check(train_set: Dataset, z: LabeledInstance, epsilons: Sequence[float], l2: float = 0.005) -> DerivationReport:
    """Compare exact up-weighted optima of a depth-0 softmax model with the linear prediction.

    For each ``eps`` the objective ``R(theta) + eps * L(z, theta)`` is solved
    by Newton's method from the unweighted optimum, and the error
    ``||Delta_eps - eps * (-H^{-1} grad L(z))||`` is reported.
    """
    if l2 <= 0:
        raise ValueError("the check needs l2 > 0 for strong convexity")
    arch = mlp_mod.ArchSpec(train_set.n_features, 0, 0, train_set.n_classes)
    X, y = train_set.X, train_set.y
    zx = np.asarray(z.features, dtype=np.float64)[None, :]
    zy = np.array([z.label])
    probe = mlp_mod.MlpModel(arch, mlp_mod.ParameterVector(np.zeros(arch.n_params), mlp_mod.layout_for(arch)))

    def hess(th, Xs, ys):
        m = probe.with_theta(th)
        return HessianOperator.for_model(m, Dataset(Xs, ys, arch.n_out), 0.0, "all_params", l2=l2).dense()

    return _derivation(
        lambda th: mlp_mod._loss_grad(arch, th, X, y, l2),
        lambda th: hess(th, X, y),
        lambda th: mlp_mod._loss_grad(arch, th, zx, zy, l2)[1],
        lambda th: mlp_mod._loss_grad(arch, th, zx, zy, l2),
        lambda th: hess(th, zx, zy),
        np.zeros(arch.n_params),
        epsilons,
    )


def derivation_check_quadratic(A: np.ndarray, b: np.ndarray, c: np.ndarray, epsilons: Sequence[float]) -> DerivationReport:
    """Same check for ``R = 0.5 theta^T A theta - b^T theta`` and a linear point loss ``c^T theta``."""
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    zero = np.zeros_like(A)
    return _derivation(
        lambda th: (0.5 * th @ A @ th - b @ th, A @ th - b),
        lambda th: A,
        lambda th: c,
        lambda th: (float(c @ th), c),
        lambda th: zero,
        np.zeros(len(b)),
        epsilons,
    )
