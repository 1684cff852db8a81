"""Dataset loading, synthesis, splitting and standardization."""

from __future__ import annotations

import csv
import gzip
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .linalg import RngStream

__all__ = [
    "DataError",
    "LabeledInstance",
    "Dataset",
    "StandardizationStats",
    "load_iris",
    "load_idx",
    "synth_blobs",
    "split",
    "standardize",
    "write_csv",
    "load_csv",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledInstance:
    features: np.ndarray
    label: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Row-major feature matrix ``X`` (n, d) with integer labels ``y``."""

    X: np.ndarray
    y: np.ndarray
    n_classes: int
    name: str = "dataset"
    index: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise DataError(f"inconsistent shapes X{X.shape} y{y.shape}")
        if not np.all(np.isfinite(X)):
            raise DataError("features must be finite")
        if len(y) and (y.min() < 0 or y.max() >= self.n_classes):
            raise DataError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        idx = np.arange(len(y)) if self.index is None else np.asarray(self.index, dtype=np.int64)
        object.__setattr__(self, "index", idx)

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> LabeledInstance:
        return LabeledInstance(self.X[i], int(self.y[i]))

    def __iter__(self) -> Iterator[LabeledInstance]:
        return (self[i] for i in range(len(self)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.n_classes == other.n_classes
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
        )

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def instances(self) -> list[LabeledInstance]:
        return list(self)

    def subset(self, rows: Sequence[int], name: str | None = None) -> "Dataset":
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(self.X[rows], self.y[rows], self.n_classes, name or self.name, self.index[rows])

    def without(self, row: int) -> "Dataset":
        keep = np.ones(len(self), dtype=bool)
        keep[row] = False
        return self.subset(np.flatnonzero(keep))

    def with_features(self, X: np.ndarray) -> "Dataset":
        return Dataset(X, self.y, self.n_classes, self.name, self.index)


def as_arrays(batch) -> tuple[np.ndarray, np.ndarray]:
    """Coerce a Dataset, a LabeledInstance or a list of instances to ``(X, y)``."""
    if isinstance(batch, Dataset):
        return batch.X, batch.y
    if isinstance(batch, LabeledInstance):
        return np.asarray(batch.features, dtype=np.float64)[None, :], np.array([batch.label])
    if isinstance(batch, tuple) and len(batch) == 2:
        X, y = batch
        return np.atleast_2d(np.asarray(X, dtype=np.float64)), np.atleast_1d(np.asarray(y, dtype=np.int64))
    items = list(batch)
    if not items:
        raise DataError("batch must be nonempty")
    X = np.stack([np.asarray(z.features, dtype=np.float64) for z in items])
    y = np.array([z.label for z in items], dtype=np.int64)
    return X, y


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_iris(path) -> Dataset:
    """Read the 150-row Iris CSV (4 numeric columns + class name or index).

    A leading non-numeric row is treated as a header. Class names map to
    indices in order of first occurrence; integer labels are used as given.
    """
    text = Path(path).read_text()
    rows = [(i + 1, r) for i, r in enumerate(csv.reader(io.StringIO(text))) if any(c.strip() for c in r)]
    if rows and rows[0][1] and not _is_number(rows[0][1][0]):
        rows = rows[1:]
    if not rows:
        raise DataError(f"{path}: no rows")
    feats, names = [], []
    for lineno, row in rows:
        if len(row) != 5:
            raise DataError(f"{path}: line {lineno}: expected 5 columns, found {len(row)}")
        try:
            feats.append([float(c) for c in row[:4]])
        except ValueError:
            raise DataError(f"{path}: line {lineno}: malformed feature value") from None
        name = row[4].strip()
        if not name:
            raise DataError(f"{path}: line {lineno}: empty label")
        names.append(name)
    if all(n.isdigit() for n in names):
        labels = [int(n) for n in names]
        n_classes = max(labels) + 1
    else:
        classes: dict[str, int] = {}
        labels = [classes.setdefault(n, len(classes)) for n in names]
        n_classes = len(classes)
    return Dataset(np.array(feats), np.array(labels), n_classes, "iris")


def write_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(ds.n_features)] + ["label"])
        for x, y in zip(ds.X, ds.y):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def load_csv(path, n_classes: int | None = None, name: str | None = None) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DataError(f"{path}: no rows")
    body = rows[1:]
    X = np.array([[float(c) for c in r[:-1]] for r in body])
    y = np.array([int(r[-1]) for r in body])
    return Dataset(X, y, n_classes or int(y.max()) + 1, name or Path(path).stem)


def _read_maybe_gz(path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_idx(images_path, labels_path, limit: int | None = None, name: str = "mnist") -> Dataset:
    """Read an IDX3 image file and its IDX1 label file (optionally gzipped).

    Pixels are scaled to [0, 1] and flattened row-major.
    """
    if limit is not None and limit <= 0:
        raise DataError("empty limit")
    img = _read_maybe_gz(images_path)
    lab = _read_maybe_gz(labels_path)
    if len(img) < 16 or struct.unpack(">I", img[:4])[0] != IDX_IMAGES_MAGIC:
        raise DataError(f"{images_path}: not IDX format (images)")
    if len(lab) < 8 or struct.unpack(">I", lab[:4])[0] != IDX_LABELS_MAGIC:
        raise DataError(f"{labels_path}: not IDX format (labels)")
    n_img, rows, cols = struct.unpack(">III", img[4:16])
    (n_lab,) = struct.unpack(">I", lab[4:8])
    if n_img != n_lab:
        raise DataError(f"image count {n_img} does not match label count {n_lab}")
    n = n_img if limit is None else min(limit, n_img)
    px = np.frombuffer(img, dtype=np.uint8, count=n * rows * cols, offset=16)
    y = np.frombuffer(lab, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    X = px.reshape(n, rows * cols).astype(np.float64) / 255.0
    return Dataset(X, y, 10, name)


def synth_blobs(n: int, d: int, k: int, spread: float, stream: RngStream) -> Dataset:
    """``k`` isotropic Gaussian clusters whose means sit one unit apart on the first axis."""
    if not (n >= k >= 2 and d >= 1 and spread > 0):
        raise DataError("synth_blobs requires n >= k >= 2, d >= 1, spread > 0")
    y = np.arange(n) % k
    means = np.zeros((k, d))
    means[:, 0] = np.arange(k, dtype=np.float64)
    X = means[y] + spread * stream.normal(n * d).reshape(n, d)
    return Dataset(X, y, k, "blobs")


def split(ds: Dataset, test_fraction: float, stream: RngStream) -> tuple[Dataset, Dataset]:
    """Stratified split sending ``round(n * test_fraction)`` rows to test.

    Each class contributes ``count * test_fraction`` rounded by largest
    remainder, so 150 Iris rows at 0.2 give 10 test rows per class and two
    one-member classes at 0.5 give a 1/1 split. A class with several members
    may not be moved to test entirely.
    """
    if not 0 < test_fraction < 1:
        raise DataError("test_fraction must lie in (0, 1)")
    # Largest-remainder allocation: per-class quotas round to the overall
    # round(n * test_fraction), ties going to the lower class index.
    members = [np.flatnonzero(ds.y == c) for c in range(ds.n_classes)]
    quota = np.array([len(m) * test_fraction for m in members])
    n_test = np.floor(quota).astype(np.int64)
    short = int(np.floor(len(ds) * test_fraction + 0.5)) - int(n_test.sum())
    for c in np.argsort(-(quota - n_test), kind="stable")[:max(short, 0)]:
        n_test[c] += 1
    train_rows, test_rows = [], []
    for c, rows in enumerate(members):
        if len(rows) == 0:
            continue
        rows = rows[stream.permutation(len(rows))]
        if n_test[c] >= len(rows) > 1:
            raise DataError(f"test_fraction {test_fraction} leaves class {c} empty in train")
        test_rows.extend(rows[:n_test[c]])
        train_rows.extend(rows[n_test[c]:])
    if not train_rows or not test_rows:
        raise DataError(f"test_fraction {test_fraction} leaves an empty partition")
    train_rows = np.sort(np.asarray(train_rows, dtype=np.int64))
    test_rows = np.sort(np.asarray(test_rows, dtype=np.int64))
    return (
        ds.subset(train_rows, f"{ds.name}-train"),
        ds.subset(test_rows, f"{ds.name}-test"),
    )


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray
    clamped: np.ndarray

    def apply(self, ds: Dataset) -> Dataset:
        return ds.with_features((ds.X - self.mean) / self.std)


def standardize(train: Dataset, others: Sequence[Dataset] = ()) -> tuple[Dataset, list[Dataset], StandardizationStats]:
    if len(train) == 0:
        raise DataError("cannot standardize an empty training set")
    mean = train.X.mean(axis=0)
    std = train.X.std(axis=0)
    clamped = std <= 1e-12
    std = np.where(clamped, 1.0, std)
    stats = StandardizationStats(mean, std, clamped)
    return stats.apply(train), [stats.apply(o) for o in others], stats
