"""Dense linear algebra helpers and the seeded random stream.

Matrices are plain 2-D ``float64`` numpy arrays. The few routines here add
shape checking and the failure reporting the rest of the package relies on;
the heavy lifting is LAPACK through numpy/scipy.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import lapack

__all__ = [
    "NotPositiveDefiniteError",
    "RngStream",
    "matvec",
    "solve_spd",
    "dense_eigh_max",
    "check_symmetric",
]


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Cholesky factorization broke down at ``pivot`` (0-based)."""

    def __init__(self, pivot: int):
        self.pivot = pivot
        super().__init__(f"matrix is not positive definite (failing pivot index {pivot})")


def _as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matvec(m, v) -> np.ndarray:
    m = _as_matrix(m)
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != m.shape[1]:
        raise ValueError(
            f"dimension mismatch: matrix is {m.shape[0]}x{m.shape[1]}, vector has shape {v.shape}"
        )
    return m @ v


def check_symmetric(a: np.ndarray, rtol: float = 1e-10) -> None:
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"matrix must be square, got {a.shape}")
    scale = max(np.abs(a).max(initial=0.0), 1e-300)
    err = np.abs(a - a.T).max(initial=0.0)
    if err > rtol * scale:
        raise ValueError(f"matrix is not symmetric (max asymmetry {err:.3e}, scale {scale:.3e})")


def solve_spd(a, b, jitter: float = 0.0) -> np.ndarray:
    """Solve ``(a + jitter*I) x = b`` by Cholesky.

    The jitter is applied once; a matrix that is still not positive definite
    raises :class:`NotPositiveDefiniteError` instead of being patched up.
    """
    a = _as_matrix(a)
    b = np.asarray(b, dtype=np.float64)
    check_symmetric(a)
    if b.shape[0] != a.shape[0]:
        raise ValueError(f"dimension mismatch: matrix is {a.shape}, right-hand side {b.shape}")
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    shifted = a + jitter * np.eye(a.shape[0]) if jitter else a.copy()
    c, info = lapack.dpotrf(shifted, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        raise NotPositiveDefiniteError(info - 1)
    if info < 0:
        raise ValueError(f"dpotrf: illegal argument {-info}")
    x, info = lapack.dpotrs(c, b, lower=1)
    if info != 0:
        raise ValueError(f"dpotrs failed with info={info}")
    return x


def dense_eigh_max(a) -> tuple[float, np.ndarray]:
    """Algebraically largest eigenpair of a symmetric matrix."""
    a = _as_matrix(a)
    check_symmetric(a, rtol=1e-8)
    w, v = np.linalg.eigh(a)
    return float(w[-1]), v[:, -1].copy()


class RngStream:
    """Seeded Philox4x64 stream (numpy ``Generator`` on a ``Philox`` bit generator).

    Philox is counter-based, so the output for a given seed is fixed across
    platforms, and :meth:`split` derives child streams keyed by
    ``(seed, index)`` that never overlap with the parent.
    """

    algorithm_id = "philox4x64-10/numpy"

    def __init__(self, seed: int, *, _key: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = int(seed)
        self._key = _key
        entropy = [self.seed, *_key] if _key else self.seed
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, key={self._key})"

    def split(self, index: int) -> "RngStream":
        return RngStream(self.seed, _key=(*self._key, int(index)))

    def normal(self, n: int) -> np.ndarray:
        if n <= 0:
            raise ValueError("n must be positive")
        return self._gen.standard_normal(n)

    def uniform(self, n: int) -> np.ndarray:
        return self._gen.random(n)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, high: int, size: int) -> np.ndarray:
        return self._gen.integers(0, high, size=size)
