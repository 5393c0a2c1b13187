"""Pearson correlation and the two-sided Mann-Whitney U-test."""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import stats

MIN_VALID_GROUP = 5
# Upper bound on n1*n2 for the exact null distribution (counts are built in
# O(min(n1, n2) * n1 * n2) big-integer steps).
EXACT_MAX_CELLS = 20_000
P_FLOOR = sys.float_info.min


class DegenerateInputError(ValueError):
    """Input has no usable variation (constant series, all-tied groups)."""


@dataclass(frozen=True)
class SimilaritySample:
    values: tuple[float, ...]
    source: str = "pre_deployment"

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        for v in vals:
            if not (math.isfinite(v) and -1.0 <= v <= 1.0):
                raise ValueError(f"similarity value {v!r} outside [-1, 1]")
        if self.source not in ("pre_deployment", "runtime"):
            raise ValueError(f"unknown similarity source {self.source!r}")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class UTestResult:
    u1: float
    u2: float
    r1: float
    r2: float
    n1: int
    n2: int
    p_value: float
    method: str
    tie_correction_applied: bool
    validity_warning: bool = False
    warnings: tuple[str, ...] = field(default=())

    def to_json(self) -> dict:
        return {
            "u1": self.u1,
            "u2": self.u2,
            "r1": self.r1,
            "r2": self.r2,
            "n1": self.n1,
            "n2": self.n2,
            "p_value": self.p_value,
            "method": self.method,
            "tie_correction_applied": self.tie_correction_applied,
            "validity_warning": self.validity_warning,
        }


def pearson(a: Sequence[float], b: Sequence[float]) -> float:
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"pearson needs two equal-length 1-D sequences, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ValueError("pearson needs at least two points")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(np.dot(xc, xc))
    syy = float(np.dot(yc, yc))
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInputError("correlation undefined for a constant sequence")
    r = float(np.dot(xc, yc)) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def rank_midranks(values: Sequence[float]) -> np.ndarray:
    """Ranks 1..n, ties sharing the mean of the ranks they span."""
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("cannot rank an empty sequence")
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot rank non-finite values")
    return stats.rankdata(x, method="average")


def tie_group_sizes(values: Sequence[float]) -> list[int]:
    _, counts = np.unique(np.asarray(values, dtype=np.float64), return_counts=True)
    return [int(c) for c in counts]


@lru_cache(maxsize=256)
def exact_u_counts(n1: int, n2: int) -> tuple[int, ...]:
    """Number of group arrangements yielding each U in 0..n1*n2 (tie-free null).

    Coefficients of the Gaussian binomial prod_{i=1..m} (1 - q^(n+i)) / (1 - q^i),
    with m the smaller group.
    """
    if n1 < 1 or n2 < 1:
        raise ValueError("group sizes must be positive")
    if n1 * n2 > EXACT_MAX_CELLS:
        raise ValueError(
            f"exact U distribution limited to n1*n2 <= {EXACT_MAX_CELLS}, got {n1}*{n2}"
        )
    m, n = min(n1, n2), max(n1, n2)
    deg = m * n
    c = [0] * (deg + 1)
    c[0] = 1
    for i in range(1, m + 1):
        step = n + i
        for k in range(deg, step - 1, -1):
            c[k] -= c[k - step]
        for k in range(i, deg + 1):
            c[k] += c[k - i]
    return tuple(c)


def exact_u_distribution(n1: int, n2: int) -> list[Fraction]:
    counts = exact_u_counts(n1, n2)
    total = math.comb(n1 + n2, n1)
    return [Fraction(c, total) for c in counts]


@lru_cache(maxsize=256)
def _exact_cdf(n1: int, n2: int) -> tuple[int, ...]:
    counts = exact_u_counts(n1, n2)
    out, run = [], 0
    for c in counts:
        run += c
        out.append(run)
    return tuple(out)


def exact_two_sided_p_rational(u: float, n1: int, n2: int) -> Fraction:
    """2 * P(U <= min(u, n1*n2 - u)) under the tie-free null, capped at 1."""
    k = int(min(u, n1 * n2 - u))
    tail = _exact_cdf(n1, n2)[k]
    return min(Fraction(1), Fraction(2 * tail, math.comb(n1 + n2, n1)))


def exact_two_sided_p(u: float, n1: int, n2: int) -> float:
    return float(exact_two_sided_p_rational(u, n1, n2))


def _normal_p(u1: float, n1: int, n2: int, ties: list[int]) -> float:
    n = n1 + n2
    tie_term = sum(t ** 3 - t for t in ties) / (n * (n - 1)) if n > 1 else 0.0
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        raise DegenerateInputError("zero variance: all observations tied")
    z = max(0.0, abs(u1 - n1 * n2 / 2.0) - 0.5) / math.sqrt(var)
    return min(1.0, math.erfc(z / math.sqrt(2.0)))


def mann_whitney(
    group1: Sequence[float],
    group2: Sequence[float],
    alternative: str = "two_sided",
    method: str = "auto",
) -> UTestResult:
    """Two-sided Mann-Whitney U-test.

    ``U1 = n1*n2 + n1(n1+1)/2 - R1`` and symmetrically for ``U2``. ``auto`` uses
    the exact null distribution for tie-free data within ``EXACT_MAX_CELLS``,
    otherwise the continuity-corrected normal approximation with tie-corrected
    variance.
    """
    if alternative != "two_sided":
        raise ValueError(f"only the two_sided alternative is supported, got {alternative!r}")
    if method not in ("auto", "exact", "normal_approx"):
        raise ValueError(f"unknown method {method!r}")
    g1 = np.asarray(group1, dtype=np.float64).reshape(-1)
    g2 = np.asarray(group2, dtype=np.float64).reshape(-1)
    n1, n2 = g1.size, g2.size
    if n1 == 0 or n2 == 0:
        raise ValueError("both groups must be non-empty")
    pooled = np.concatenate([g1, g2])
    ranks = rank_midranks(pooled)
    ties = [t for t in tie_group_sizes(pooled) if t > 1]
    if len(ties) == 1 and ties[0] == n1 + n2:
        raise DegenerateInputError("all observations in both groups are identical")
    r1 = float(ranks[:n1].sum())
    r2 = float(ranks[n1:].sum())
    u1 = n1 * n2 + n1 * (n1 + 1) / 2.0 - r1
    u2 = n1 * n2 + n2 * (n2 + 1) / 2.0 - r2

    exact_ok = not ties and n1 * n2 <= EXACT_MAX_CELLS
    if method == "exact" and not exact_ok:
        raise ValueError(
            "exact method needs tie-free data and n1*n2 <= %d" % EXACT_MAX_CELLS
        )
    use_exact = method == "exact" or (method == "auto" and exact_ok)
    if use_exact:
        p = exact_two_sided_p(u1, n1, n2)
    else:
        p = _normal_p(u1, n1, n2, ties)
    p = max(p, P_FLOOR)

    warns = ()
    small = min(n1, n2) < MIN_VALID_GROUP
    if small:
        warns = (
            f"group size {min(n1, n2)} below {MIN_VALID_GROUP}: U-test result not statistically valid",
        )
    return UTestResult(
        u1=u1,
        u2=u2,
        r1=r1,
        r2=r2,
        n1=n1,
        n2=n2,
        p_value=p,
        method="exact" if use_exact else "normal_approx",
        tie_correction_applied=bool(ties) and not use_exact,
        validity_warning=small,
        warnings=warns,
    )
