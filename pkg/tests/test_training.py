import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from influence_loo.bnn import build_bnn
from influence_loo.data import Dataset
from influence_loo.linalg import RngStream
from influence_loo.mlp import ArchSpec, build_mlp, grad, loss, max_loss_instance
from influence_loo.training import (
    AdamState,
    PlateauScheduler,
    SwaState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    finetune_last_layer,
    finetune_removals,
    newton_minimize,
    swa_update,
    train,
)

from conftest import rel_err

D0 = ArchSpec(4, 0, 0, 3)
D1 = ArchSpec(4, 1, 5, 3)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(plateau_factor=1.0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="sgd")
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    assert TrainConfig(epochs=100).swa_start == 75


def test_adam_zero_grad():
    p = np.array([1.0, -2.0])
    out, st_ = adam_step(p, np.zeros(2), AdamState.fresh(2), 0.1)
    assert np.array_equal(out, p) and st_.t == 1


def test_adam_first_step_is_lr_sign():
    p = np.zeros(3)
    g = np.array([3.0, -0.5, 1e-3])
    out, _ = adam_step(p, g, AdamState.fresh(3), 0.01)
    expected = -0.01 * g / (np.abs(g) + 1e-8)
    assert np.max(np.abs(out - expected)) < 1e-15


def test_adam_shape_check():
    with pytest.raises(ValueError):
        adam_step(np.zeros(2), np.zeros(3), AdamState.fresh(2), 0.1)


def test_plateau_single_event():
    s = PlateauScheduler(1e-3, patience=5, factor=0.1, min_lr=1e-7)
    events = [s.step(x) for x in [1.0] * 7]
    fired = [e for e in events if e is not None]
    assert fired == [pytest.approx(1e-4)]
    assert events.index(fired[0]) == 5


def test_plateau_floor():
    s = PlateauScheduler(1e-6, patience=1, factor=0.1, min_lr=1e-7)
    out = [s.step(1.0) for _ in range(6)]
    assert [e for e in out if e is not None] == [1e-7]
    assert s.lr == 1e-7


@given(st.lists(st.floats(0, 10), min_size=1, max_size=200), st.integers(1, 10))
def test_plateau_monotone(losses, patience):
    s = PlateauScheduler(1e-3, patience, 0.5, 1e-6)
    lrs = [s.lr]
    for x in losses:
        s.step(x)
        lrs.append(s.lr)
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert min(lrs) >= 1e-6


def test_swa_examples():
    p = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(swa_update(SwaState(), p).mean, p)
    assert np.array_equal(swa_update(swa_update(SwaState(), p), -p).mean, np.zeros(3))
    with pytest.raises(ValueError):
        swa_update(swa_update(SwaState(), p), np.zeros(2))


@given(st.integers(0, 10_000), st.integers(1, 20))
def test_swa_is_arithmetic_mean(seed, k):
    snaps = RngStream(seed).normal(k * 5).reshape(k, 5)
    s = SwaState()
    for row in snaps:
        s = swa_update(s, row)
    assert s.count == k
    assert np.max(np.abs(s.mean - snaps.mean(axis=0))) < 1e-12


def test_zero_lr_keeps_params(iris_split):
    tr, _ = iris_split
    m = build_mlp(D1, RngStream(0))
    out, log = train(m, tr, TrainConfig(lr=0.0, epochs=20))
    assert np.array_equal(out.theta, m.theta)
    assert len(set(log.losses)) == 1 and len(log.losses) == 20


def test_training_deterministic(iris_split):
    tr, _ = iris_split
    cfg = TrainConfig(epochs=200, weight_decay=0.005, batch_size=16, seed=4)
    a, _ = train(build_mlp(D1, RngStream(1)), tr, cfg)
    b, _ = train(build_mlp(D1, RngStream(1)), tr, cfg)
    assert np.array_equal(a.theta, b.theta)


def test_iris_reference_run(iris_split):
    tr, _ = iris_split
    m0 = build_mlp(D1, RngStream(0))
    m, log = train(m0, tr, TrainConfig(weight_decay=0.005, epochs=60_000))
    assert log.losses[-1] < log.losses[0]
    assert np.linalg.norm(grad(m, tr, 0.005).values) < 1e-3
    assert len(log.losses) == 60_000


def test_gd_convex_monotone(iris_split):
    tr, _ = iris_split
    l2 = 0.005
    # softmax cross-entropy curvature is at most 1/2 per unit input norm
    L = 0.5 * float(np.max(np.sum(tr.X**2, axis=1) + 1.0)) + l2
    _, log = train(build_mlp(D0, RngStream(2)), tr, TrainConfig(optimizer="gd", lr=0.9 / L, epochs=500, weight_decay=l2))
    assert all(b <= a + 1e-15 for a, b in zip(log.losses, log.losses[1:]))


def test_swa_finalizes_to_average(iris_split):
    tr, _ = iris_split
    cfg = TrainConfig(epochs=40, swa=True, lr=0.01)
    _, log = train(build_mlp(D1, RngStream(0)), tr, cfg)
    assert log.swa_snapshots == 10


def test_divergence_reported(iris_split):
    tr, _ = iris_split
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(TrainingDiverged, match="diverged at epoch"):
        train(build_mlp(D0, RngStream(0)), tr, TrainConfig(optimizer="gd", lr=1e300, epochs=50, weight_decay=1.0))


def test_log_csv(iris_split, tmp_path):
    tr, te = iris_split
    _, log = train(build_mlp(D0, RngStream(0)), tr, TrainConfig(epochs=3), probe=te[0])
    p = tmp_path / "log.csv"
    log.to_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "epoch,loss,lr,probe_test_loss"
    assert len(lines) == 4


def test_finetune_zero_epochs(trained_small):
    m, tr, _ = trained_small
    out, log = finetune_last_layer(m, tr, 0, TrainConfig(weight_decay=0.005))
    assert np.array_equal(out.theta, m.theta) and log.losses == []


def test_finetune_isolation_and_stationarity(trained_small):
    m, tr, _ = trained_small
    out, log = finetune_last_layer(m, tr, 200, TrainConfig(weight_decay=0.005, lr=1e-6))
    lo, hi = m.params.last_layer_range
    assert np.array_equal(out.theta[:lo], m.theta[:lo])
    assert loss(out, tr, 0.005) <= loss(m, tr, 0.005) + 1e-9


def test_finetune_isolation_bnn(iris_split):
    tr, _ = iris_split
    m = build_bnn(D1, RngStream(0), kl_weight=1 / len(tr))
    out, _ = finetune_last_layer(m, tr.without(0), 30, TrainConfig(lr=1e-2))
    lo, hi = m.last_layer_mean_range
    assert np.array_equal(out.means.values[:lo], m.means.values[:lo])
    assert np.array_equal(out.logvars.values, m.logvars.values)
    assert not np.array_equal(out.means.values[lo:hi], m.means.values[lo:hi])


def test_finetune_matches_scratch_on_convex_model(iris_split):
    tr, _ = iris_split
    cfg = TrainConfig(weight_decay=0.005, lr=0.05, epochs=6000)
    full, _ = train(build_mlp(D0, RngStream(0)), tr, cfg)
    r = max_loss_instance(full, tr)
    reduced = tr.without(r)
    tuned, _ = finetune_last_layer(full, reduced, 6000, cfg)
    scratch, _ = train(build_mlp(D0, RngStream(0)), reduced, cfg)
    assert rel_err(tuned.theta, scratch.theta) < 1e-4


def test_batched_removals_match_single(trained_small):
    m, tr, te = trained_small
    cfg = TrainConfig(weight_decay=0.005, lr=1e-3, plateau_patience=5)
    res = finetune_removals(m, tr, [3, 17], 60, cfg, probe=te[0])
    for r in res:
        single, log = finetune_last_layer(m, tr.without(r.removed_index), 60, cfg, probe=te[0])
        assert np.max(np.abs(single.theta - r.model.theta)) < 1e-12
        assert np.allclose(log.probe_losses, r.log.probe_losses, rtol=0, atol=1e-12)
        assert log.lr_events == r.log.lr_events


def test_newton_quadratic():
    A = np.array([[3.0, 1.0], [1.0, 2.0]])
    b = np.array([1.0, -1.0])
    x, gn, ok = newton_minimize(lambda x: (0.5 * x @ A @ x - b @ x, A @ x - b), lambda x: A, np.zeros(2))
    assert ok and gn < 1e-10
    assert np.allclose(x, np.linalg.solve(A, b), atol=1e-14)
