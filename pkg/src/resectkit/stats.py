"""Paired analysis: descriptive statistics, paired t-test, Likert summaries.

The Student-t tail probability is evaluated through the regularized
incomplete beta function (continued fraction, absolute tolerance 1e-10,
iteration cap 300) so the package needs no statistics dependency; the
degrees of freedom here are tiny and the fraction converges in a handful
of terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

BETA_TOL = 1e-10
BETA_MAX_ITER = 300

__all__ = [
    "StatsError",
    "PairedSample",
    "TestResult",
    "DescriptiveStats",
    "paired_t_test",
    "describe",
    "likert_summary",
    "load_likert",
    "student_t_cdf",
    "regularized_incomplete_beta",
]


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class PairedSample:
    """Two within-subject measurement lists, index-aligned."""

    values_a: tuple[float, ...]
    values_b: tuple[float, ...]
    labels: tuple[str, str] = ("a", "b")

    def __post_init__(self):
        a = tuple(float(x) for x in self.values_a)
        b = tuple(float(x) for x in self.values_b)
        if len(a) != len(b):
            raise StatsError("paired samples must have equal length")
        if len(a) < 2:
            raise StatsError("paired test needs at least 2 pairs")
        if not all(math.isfinite(x) for x in a + b):
            raise StatsError("non-finite values in paired sample")
        object.__setattr__(self, "values_a", a)
        object.__setattr__(self, "values_b", b)


@dataclass(frozen=True)
class TestResult:
    t_statistic: float
    degrees_of_freedom: int
    p_value: float
    mean_difference: float
    sd_difference: float
    degenerate: bool = False


@dataclass(frozen=True)
class DescriptiveStats:
    mean: float
    sd: float          # nan when undefined (n = 1)
    median: float
    min: float
    max: float
    n: int


def _contfrac_beta(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, BETA_MAX_ITER + 1):
        m2 = 2 * m
        num = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + num * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + num / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        num = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + num * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + num / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < BETA_TOL:
            return h
    raise StatsError(f"incomplete beta did not converge within {BETA_MAX_ITER} terms")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) to ~1e-10 absolute accuracy."""
    if not 0.0 <= x <= 1.0:
        raise StatsError(f"x must be in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    # use whichever tail converges fastest
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _contfrac_beta(a, b, x) / a
    return 1.0 - front * _contfrac_beta(b, a, 1.0 - x) / b


def student_t_cdf(t: float, df: int) -> float:
    """P(T <= t) for Student's t with ``df`` degrees of freedom."""
    if df < 1:
        raise StatsError("degrees of freedom must be >= 1")
    if t == 0.0:
        return 0.5
    x = df / (df + t * t)
    tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, x)
    return 1.0 - tail if t > 0 else tail


def paired_t_test(sample: PairedSample) -> TestResult:
    """Two-sided paired t-test on the within-pair differences a - b."""
    d = np.asarray(sample.values_a) - np.asarray(sample.values_b)
    n = len(d)
    df = n - 1
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return TestResult(0.0, df, 1.0, mean, sd)
        # all differences identical and nonzero: t is unbounded
        return TestResult(math.copysign(math.inf, mean), df, 0.0, mean, sd,
                          degenerate=True)
    t = mean / (sd / math.sqrt(n))
    p = 2.0 * (1.0 - student_t_cdf(abs(t), df))
    p = min(1.0, max(p, 0.0))
    return TestResult(float(t), df, float(p), mean, sd)


def describe(xs) -> DescriptiveStats:
    a = np.asarray(list(xs), dtype=np.float64)
    if a.size == 0:
        raise StatsError("cannot describe an empty sample")
    if not np.all(np.isfinite(a)):
        raise StatsError("non-finite values")
    sd = float(a.std(ddof=1)) if a.size > 1 else float("nan")
    return DescriptiveStats(
        mean=float(a.mean()),
        sd=sd,
        median=float(np.median(a)),
        min=float(a.min()),
        max=float(a.max()),
        n=int(a.size),
    )


def likert_summary(responses) -> tuple[int, dict[int, int]]:
    """Median (even n: lower of the two central values) and level counts."""
    vals = [int(v) for v in responses]
    if not vals:
        raise StatsError("empty Likert responses")
    if any(v < 1 or v > 5 for v in vals):
        raise StatsError("Likert responses must be integers in 1..5")
    ordered = sorted(vals)
    median = ordered[(len(ordered) - 1) // 2]
    counts = {level: ordered.count(level) for level in range(1, 6)}
    return median, counts


def load_likert(path) -> list[int]:
    """One integer response (1..5) per line; '#' comments allowed."""
    from pathlib import Path
    vals = []
    for ln_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            vals.append(int(line))
        except ValueError as exc:
            raise StatsError(f"{path}: line {ln_no}: {exc}") from exc
    if any(v < 1 or v > 5 for v in vals):
        raise StatsError(f"{path}: responses must be in 1..5")
    return vals
