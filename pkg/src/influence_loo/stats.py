"""Rank and product-moment correlation, one-way ANOVA and 95% intervals.

The F and t distribution tails come from a self-contained regularized
incomplete beta function (Lentz continued fraction), so nothing here needs
a statistics package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "UndefinedCorrelation",
    "AnovaResult",
    "Interval",
    "rankdata",
    "spearman",
    "pearson",
    "betainc_reg",
    "f_sf",
    "t_cdf",
    "t_ppf",
    "anova_oneway",
    "interval95",
]


class UndefinedCorrelation(ValueError):
    def __init__(self, msg: str = "undefined correlation: an input has zero variance"):
        super().__init__(msg)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"inputs must be 1-D with equal lengths, got {a.shape} and {b.shape}")
    if len(a) < 2:
        raise ValueError("need at least two observations")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("inputs must be finite")
    return a, b


def rankdata(a) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    a = np.asarray(a, dtype=np.float64)
    order = np.argsort(a, kind="mergesort")
    s = a[order]
    ranks = np.empty(len(a))
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def pearson(a, b) -> float:
    a, b = _pair(a, b)
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = float(da @ da), float(db @ db)
    if saa == 0.0 or sbb == 0.0:
        raise UndefinedCorrelation()
    r = float(da @ db) / math.sqrt(saa * sbb)
    return max(-1.0, min(1.0, r))


def spearman(a, b) -> float:
    a, b = _pair(a, b)
    return pearson(rankdata(a), rankdata(b))


def _betacf(a: float, b: float, x: float) -> float:
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    lbt = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    bt = math.exp(lbt)
    # the fraction converges fastest on the side of the mean
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def f_sf(f: float, d1: float, d2: float) -> float:
    """Survival function ``P(F > f)`` of the F(d1, d2) distribution."""
    if f <= 0:
        return 1.0
    if math.isinf(f):
        return 0.0
    return betainc_reg(0.5 * d2, 0.5 * d1, d2 / (d2 + d1 * f))


def t_cdf(t: float, df: float) -> float:
    tail = 0.5 * betainc_reg(0.5 * df, 0.5, df / (df + t * t))
    return 1.0 - tail if t > 0 else tail


def t_ppf(q: float, df: float) -> float:
    """Quantile of Student's t by bisection on :func:`t_cdf`."""
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    if q == 0.5:
        return 0.0
    if q < 0.5:
        return -t_ppf(1.0 - q, df)
    lo, hi = 0.0, 1.0
    while t_cdf(hi, df) < q:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if t_cdf(mid, df) < q:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * hi:
            break
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class AnovaResult:
    f_stat: float
    p_value: float
    df_between: int
    df_within: int
    degenerate: bool = False


def anova_oneway(groups: Sequence[Sequence[float]]) -> AnovaResult:
    """One-way ANOVA F test of equal group means.

    Zero within-group variance with unequal means gives ``f_stat = inf``,
    ``p_value = 0`` and ``degenerate = True``.
    """
    gs = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(gs) < 2:
        raise ValueError("need at least two groups")
    if any(len(g) < 2 for g in gs):
        raise ValueError("every group needs at least two samples")
    total = sum(len(g) for g in gs)
    grand = np.concatenate(gs).mean()
    ss_between = float(sum(len(g) * (g.mean() - grand) ** 2 for g in gs))
    ss_within = float(sum(((g - g.mean()) ** 2).sum() for g in gs))
    dfb, dfw = len(gs) - 1, total - len(gs)
    scale = max(1.0, float(np.abs(np.concatenate(gs)).max())) ** 2
    if ss_within <= 1e-28 * scale * total:
        if ss_between <= 1e-28 * scale * total:
            return AnovaResult(0.0, 1.0, dfb, dfw)
        return AnovaResult(math.inf, 0.0, dfb, dfw, degenerate=True)
    f = (ss_between / dfb) / (ss_within / dfw)
    return AnovaResult(f, f_sf(f, dfb, dfw), dfb, dfw)


@dataclass(frozen=True)
class Interval:
    low: float
    high: float
    level: float = 0.95
    method: str = "percentile"


def interval95(samples: Sequence[float], method: str = "percentile") -> Interval:
    """Percentile interval (linear interpolation) or Student-t interval for the mean."""
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("need at least two samples")
    if method == "percentile":
        lo, hi = np.percentile(x, [2.5, 97.5])
        return Interval(float(lo), float(hi), 0.95, method)
    if method == "t":
        m = float(x.mean())
        half = t_ppf(0.975, len(x) - 1) * float(x.std(ddof=1)) / math.sqrt(len(x))
        return Interval(m - half, m + half, 0.95, method)
    raise ValueError(f"unknown interval method {method!r}")
