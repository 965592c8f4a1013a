"""Welch's t-test with a self-contained Student-t tail."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class StatsError(ValueError):
    pass


_TINY = 1e-300


def _beta_cf(a: float, b: float, x: float, tol: float = 1e-15, max_iter: int = 10_000) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _TINY else _TINY)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        for num in (m * (b - m) * x / ((qam + m2) * (a + m2)),
                    -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))):
            d = 1.0 + num * d
            d = 1.0 / (d if abs(d) > _TINY else _TINY)
            c = 1.0 + num / c
            c = c if abs(c) > _TINY else _TINY
            delta = d * c
            h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise StatsError(f"incomplete beta failed to converge for a={a}, b={b}, x={x}")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if a <= 0 or b <= 0:
        raise StatsError("betainc needs a > 0 and b > 0")
    if not 0.0 <= x <= 1.0:
        raise StatsError(f"betainc needs x in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    # the fraction converges fast on this side of the mean; use symmetry otherwise
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, dof: float) -> float:
    """``P(|T| >= |t|)`` for Student's t with ``dof`` degrees of freedom."""
    if dof <= 0:
        raise StatsError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    return min(1.0, betainc(dof / 2.0, 0.5, dof / (dof + t * t)))


@dataclass(frozen=True)
class WelchResult:
    t: float
    dof: float
    p: float


def welch_t_test(a, b) -> WelchResult:
    """Unequal-variance two-sample t-test with Welch-Satterthwaite degrees of freedom."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size < 2 or b.size < 2:
        raise StatsError("each sample needs at least two values")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise StatsError("samples must be finite")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    se2 = va + vb
    if se2 == 0.0:
        raise StatsError("both samples have zero variance; the t statistic is undefined")
    t = (a.mean() - b.mean()) / math.sqrt(se2)
    dof = se2 ** 2 / (va ** 2 / (a.size - 1) + vb ** 2 / (b.size - 1))
    return WelchResult(float(t), float(dof), t_two_sided_p(float(t), float(dof)))
