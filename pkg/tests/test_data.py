import gzip
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from influence_loo.data import (
    DataError,
    Dataset,
    load_csv,
    load_idx,
    load_iris,
    split,
    standardize,
    synth_blobs,
    write_csv,
)
from influence_loo.linalg import RngStream

from conftest import IRIS, MNIST


def test_load_iris_shape(iris):
    assert (len(iris), iris.n_features, iris.n_classes) == (150, 4, 3)
    assert np.bincount(iris.y).tolist() == [50, 50, 50]


def test_load_iris_first_occurrence_mapping(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("1,2,3,4,b\n1,2,3,4,a\n1,2,3,4,b\n")
    ds = load_iris(p)
    assert ds.y.tolist() == [0, 1, 0]


def test_load_iris_empty(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    with pytest.raises(DataError, match="no rows"):
        load_iris(p)


def test_load_iris_malformed_line_number(tmp_path):
    lines = IRIS.read_text().splitlines()
    lines[6] = "5.1,abc,1.4,0.2,setosa"
    p = tmp_path / "bad.csv"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match="line 7"):
        load_iris(p)


def test_load_iris_wrong_columns(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("1,2,3,setosa\n")
    with pytest.raises(DataError, match="expected 5 columns"):
        load_iris(p)


def test_iris_csv_round_trip(iris, tmp_path):
    p = tmp_path / "iris_rt.csv"
    write_csv(iris, p)
    assert load_iris(p) == iris
    assert load_csv(p, 3) == iris


def _idx_files(tmp_path, n=7, img_magic=0x803, lab_magic=0x801, n_lab=None):
    px = (np.arange(n * 784) % 256).astype(np.uint8)
    img = struct.pack(">IIII", img_magic, n, 28, 28) + px.tobytes()
    lab = struct.pack(">II", lab_magic, n if n_lab is None else n_lab) + (np.arange(n) % 10).astype(np.uint8).tobytes()
    ip, lp = tmp_path / "img.gz", tmp_path / "lab"
    with gzip.open(ip, "wb") as fh:
        fh.write(img)
    lp.write_bytes(lab)
    return ip, lp, px


def test_load_idx_synthetic(tmp_path):
    ip, lp, px = _idx_files(tmp_path)
    ds = load_idx(ip, lp)
    assert (len(ds), ds.n_features, ds.n_classes) == (7, 784, 10)
    assert np.allclose(ds.X.ravel(), px / 255.0)
    assert load_idx(ip, lp, limit=3).X.shape == (3, 784)


def test_load_idx_errors(tmp_path):
    ip, lp, _ = _idx_files(tmp_path, lab_magic=0x802)
    with pytest.raises(DataError, match="not IDX format"):
        load_idx(ip, lp)
    ip, lp, _ = _idx_files(tmp_path, n_lab=6)
    with pytest.raises(DataError, match="does not match"):
        load_idx(ip, lp)
    with pytest.raises(DataError, match="empty limit"):
        load_idx(ip, lp, limit=0)


def test_load_idx_mnist_subset():
    ds = load_idx(MNIST / "train-images-idx3-ubyte.gz", MNIST / "train-labels-idx1-ubyte.gz", limit=5000)
    assert (len(ds), ds.n_features, ds.n_classes) == (5000, 784, 10)
    assert ds.X.min() >= 0.0 and ds.X.max() <= 1.0
    assert set(np.unique(ds.y)) == set(range(10))


def test_synth_blobs_balance_and_determinism():
    a = synth_blobs(60, 2, 3, 0.5, RngStream(1))
    b = synth_blobs(60, 2, 3, 0.5, RngStream(1))
    assert np.bincount(a.y).tolist() == [20, 20, 20]
    assert a == b


def test_synth_blobs_small_spread():
    ds = synth_blobs(60, 2, 3, 1e-9, RngStream(1))
    for c in range(3):
        assert ds.X[ds.y == c].var(axis=0).max() < 1e-16


def test_synth_blobs_rejects():
    with pytest.raises(DataError):
        synth_blobs(2, 2, 3, 0.5, RngStream(0))


def test_split_iris_counts(iris):
    tr, te = split(iris, 0.2, RngStream(0))
    assert (len(tr), len(te)) == (120, 30)
    assert np.bincount(te.y).tolist() == [10, 10, 10]


def test_split_two_instance_boundary():
    ds = Dataset(np.array([[0.0], [1.0]]), np.array([0, 1]), 2)
    tr, te = split(ds, 0.5, RngStream(0))
    assert (len(tr), len(te)) == (1, 1)


def test_split_rejects_empty_train_class(iris):
    with pytest.raises(DataError):
        split(iris, 0.995, RngStream(0))


@given(st.floats(0.05, 0.6), st.integers(0, 2**32))
def test_split_partition(frac, seed):
    ds = synth_blobs(31, 2, 3, 1.0, RngStream(5))
    tr, te = split(ds, frac, RngStream(seed))
    assert len(tr) + len(te) == len(ds)
    assert set(tr.index.tolist()).isdisjoint(te.index.tolist())
    tr2, te2 = split(ds, frac, RngStream(seed))
    assert np.array_equal(tr.index, tr2.index) and np.array_equal(te.index, te2.index)


def test_standardize_hand_example():
    ds = Dataset(np.array([[0.0], [2.0]]), np.array([0, 1]), 2)
    out, _, stats = standardize(ds)
    assert stats.mean.tolist() == [1.0] and stats.std.tolist() == [1.0]
    assert out.X.ravel().tolist() == [-1.0, 1.0]


def test_standardize_constant_feature_clamped():
    ds = Dataset(np.array([[3.0, 1.0], [3.0, 2.0]]), np.array([0, 1]), 2)
    out, _, stats = standardize(ds)
    assert stats.clamped.tolist() == [True, False]
    assert np.all(out.X[:, 0] == 0.0)


@given(st.integers(0, 2**32))
def test_standardize_moments(seed):
    r = RngStream(seed)
    ds = Dataset(r.normal(40 * 3).reshape(40, 3) * [1.0, 5.0, 0.1] + [2.0, -3.0, 7.0], np.zeros(40, dtype=int), 1)
    out, (again,), stats = standardize(ds, [ds])
    assert np.abs(out.X.mean(axis=0)).max() < 1e-10
    assert np.abs(out.X.std(axis=0) - 1.0).max() < 1e-10
    assert np.array_equal(again.X, out.X)
