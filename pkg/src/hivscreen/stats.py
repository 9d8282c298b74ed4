"""Nonparametric statistics for the output-length study.

Implements the 3σ outlier filter, the Shapiro–Wilk test (Royston's AS R94
approximation), Spearman rank correlation and the Mann–Whitney U test, plus
the driver relating input/output token lengths to prediction correctness.
Only the normal and Student-t distribution functions come from SciPy.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Any, Sequence

from scipy.stats import norm, t as student_t

TWO_SIDED, LESS, GREATER = "two_sided", "less", "greater"
ALTERNATIVES = (TWO_SIDED, LESS, GREATER)
EXACT, APPROXIMATE = "exact", "approximate"
MW_EXACT_MAX = 8
SPEARMAN_EXACT_MAX = 10


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    method: str
    alternative: str = TWO_SIDED
    n: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_value <= 1.0:
            raise StatsError(f"p-value {self.p_value} outside [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


TestResult.__test__ = False  # not a pytest test class


def _finite(values: Sequence[float], name: str = "sample") -> list[float]:
    out = [float(v) for v in values]
    if not all(math.isfinite(v) for v in out):
        raise StatsError(f"{name} contains non-finite values")
    return out


def _mean_sd(values: Sequence[float]) -> tuple[float, float]:
    n = len(values)
    m = math.fsum(values) / n
    var = math.fsum((v - m) ** 2 for v in values) / (n - 1)
    return m, math.sqrt(var)


# --- 3σ filter ---------------------------------------------------------------


def three_sigma_mask(values: Sequence[float]) -> list[bool]:
    """Which values lie within mean ± 3 sample standard deviations (single pass)."""
    values = _finite(values)
    if len(values) < 2:
        raise StatsError("three-sigma filter needs at least 2 values")
    m, sd = _mean_sd(values)
    lo, hi = m - 3 * sd, m + 3 * sd
    return [lo <= v <= hi for v in values]


def three_sigma_filter(values: Sequence[float]) -> list[float]:
    """Values within mean ± 3 sample standard deviations; not iterated."""
    return [v for v, keep in zip(values, three_sigma_mask(values)) if keep]


# --- Shapiro–Wilk (AS R94) -------------------------------------------------------

_C1 = (0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_C3 = (0.544, -0.39978, 0.025054, -6.714e-4)
_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_C6 = (-0.4803, -0.082676, 0.0030302)
_G = (-2.273, 0.459)


def _poly(coeffs: Sequence[float], x: float) -> float:
    return math.fsum(c * x**i for i, c in enumerate(coeffs))


@lru_cache(maxsize=64)
def _sw_coefficients(n: int) -> tuple[float, ...]:
    """Positive half of the antisymmetric Shapiro–Wilk weights, largest first."""
    half = n // 2
    if n == 3:
        return (math.sqrt(0.5),)
    m = [-norm.ppf((i - 0.375) / (n + 0.25)) for i in range(1, half + 1)]
    summ2 = 2 * math.fsum(v * v for v in m)
    ssumm2 = math.sqrt(summ2)
    u = 1 / math.sqrt(n)
    a = [0.0] * half
    a[0] = m[0] / ssumm2 + _poly(_C1, u)
    if n > 5:
        a[1] = m[1] / ssumm2 + _poly(_C2, u)
        start = 2
        fac = math.sqrt((summ2 - 2 * m[0] ** 2 - 2 * m[1] ** 2) / (1 - 2 * a[0] ** 2 - 2 * a[1] ** 2))
    else:
        start = 1
        fac = math.sqrt((summ2 - 2 * m[0] ** 2) / (1 - 2 * a[0] ** 2))
    for i in range(start, half):
        a[i] = m[i] / fac
    return tuple(a)


def shapiro_wilk(values: Sequence[float]) -> TestResult:
    """Shapiro–Wilk W and its p-value, for 3 <= n <= 5000."""
    x = sorted(_finite(values))
    n = len(x)
    if not 3 <= n <= 5000:
        raise StatsError(f"Shapiro-Wilk needs 3 <= n <= 5000, got n={n}")
    mean = math.fsum(x) / n
    ss = math.fsum((v - mean) ** 2 for v in x)
    if ss <= 1e-300 or x[0] == x[-1]:
        raise StatsError("Shapiro-Wilk undefined for a zero-variance sample")
    a = _sw_coefficients(n)
    numerator = math.fsum(ai * (x[n - 1 - i] - x[i]) for i, ai in enumerate(a))
    w = min(numerator**2 / ss, 1.0)

    if n == 3:
        p = 6 / math.pi * (math.asin(math.sqrt(w)) - math.pi / 3)
        return TestResult(w, min(max(p, 0.0), 1.0), APPROXIMATE, TWO_SIDED, n)
    if w >= 1.0:
        return TestResult(w, 1.0, APPROXIMATE, TWO_SIDED, n)
    y = math.log(1 - w)
    if n <= 11:
        gamma = _poly(_G, n)
        if y >= gamma:
            return TestResult(w, 0.0, APPROXIMATE, TWO_SIDED, n)
        y = -math.log(gamma - y)
        mu, sigma = _poly(_C3, n), math.exp(_poly(_C4, n))
    else:
        ln = math.log(n)
        mu, sigma = _poly(_C5, ln), math.exp(_poly(_C6, ln))
    p = float(norm.sf((y - mu) / sigma))
    return TestResult(w, p, APPROXIMATE, TWO_SIDED, n)


# --- ranks and Spearman ---------------------------------------------------------


def average_ranks(values: Sequence[float]) -> list[float]:
    """1-based ranks with ties sharing their mean rank."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        shared = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = shared
        i = j + 1
    return ranks


def _pearson(x: Sequence[float], y: Sequence[float]) -> float:
    n = len(x)
    mx, my = math.fsum(x) / n, math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return max(-1.0, min(1.0, sxy / math.sqrt(sxx * syy)))


def spearman(x: Sequence[float], y: Sequence[float], exact: bool = False) -> TestResult:
    """Spearman's ρ with a two-sided p-value.

    The p-value uses the t approximation with n-2 degrees of freedom; with
    ``exact=True`` and n <= 10 it enumerates all permutations instead.
    """
    x, y = _finite(x, "x"), _finite(y, "y")
    n = len(x)
    if n != len(y):
        raise StatsError(f"spearman needs equal lengths, got {n} and {len(y)}")
    if n < 3:
        raise StatsError("spearman needs at least 3 pairs")
    rx, ry = average_ranks(x), average_ranks(y)
    if len(set(rx)) == 1 or len(set(ry)) == 1:
        raise StatsError("spearman undefined: zero rank variance")
    rho = _pearson(rx, ry)
    if exact:
        if n > SPEARMAN_EXACT_MAX:
            raise StatsError(f"exact Spearman p-value supports n <= {SPEARMAN_EXACT_MAX}")
        hits = total = 0
        for perm in itertools.permutations(ry):
            total += 1
            hits += abs(_pearson(rx, perm)) >= abs(rho) - 1e-12
        return TestResult(rho, hits / total, EXACT, TWO_SIDED, n)
    if abs(rho) == 1.0:
        return TestResult(rho, 0.0, APPROXIMATE, TWO_SIDED, n)
    tstat = rho * math.sqrt((n - 2) / (1 - rho * rho))
    p = float(2 * student_t.sf(abs(tstat), n - 2))
    return TestResult(rho, min(p, 1.0), APPROXIMATE, TWO_SIDED, n)


# --- Mann–Whitney U -----------------------------------------------------------


def u_statistic(x: Sequence[float], y: Sequence[float]) -> float:
    """#{x_i > y_j} + ½ #{x_i == y_j}."""
    return math.fsum(1.0 if a > b else 0.5 if a == b else 0.0 for a in x for b in y)


@lru_cache(maxsize=256)
def u_null_counts(n: int, m: int) -> tuple[int, ...]:
    """Number of rank arrangements giving each U in 0..n*m (no ties)."""
    if n == 0 or m == 0:
        return (1,)
    with_largest_in_x = u_null_counts(n - 1, m)  # largest value in x adds m to U
    in_y = u_null_counts(n, m - 1)
    counts = [0] * (n * m + 1)
    for u, c in enumerate(in_y):
        counts[u] += c
    for u, c in enumerate(with_largest_in_x):
        counts[u + m] += c
    return tuple(counts)


def mann_whitney(x: Sequence[float], y: Sequence[float], alternative: str = TWO_SIDED) -> TestResult:
    """Mann–Whitney U test of x against y; ``greater`` means x tends to exceed y.

    Exact null distribution when max(|x|, |y|) <= 8 and there are no ties;
    otherwise the normal approximation with tie and continuity corrections.
    """
    if alternative not in ALTERNATIVES:
        raise StatsError(f"alternative must be one of {ALTERNATIVES}, got {alternative!r}")
    x, y = _finite(x, "x"), _finite(y, "y")
    n, m = len(x), len(y)
    if n == 0 or m == 0:
        raise StatsError("mann_whitney needs two non-empty samples")
    u = u_statistic(x, y)
    pooled = x + y
    has_ties = len(set(pooled)) < len(pooled)

    if max(n, m) <= MW_EXACT_MAX and not has_ties:
        counts = u_null_counts(n, m)
        total = math.comb(n + m, n)
        k = int(u)
        p_less = sum(counts[: k + 1]) / total
        p_greater = sum(counts[k:]) / total
        method = EXACT
    else:
        mu = n * m / 2
        N = n + m
        tie_sum = sum(c**3 - c for c in _tie_counts(pooled))
        var = n * m / 12 * ((N + 1) - tie_sum / (N * (N - 1)))
        if var <= 0:
            return TestResult(u, 1.0, APPROXIMATE, alternative, n + m)
        sd = math.sqrt(var)
        p_greater = float(norm.sf((u - mu - 0.5) / sd))
        p_less = float(norm.cdf((u - mu + 0.5) / sd))
        method = APPROXIMATE
    if alternative == GREATER:
        p = p_greater
    elif alternative == LESS:
        p = p_less
    else:
        p = 2 * min(p_less, p_greater)
    return TestResult(u, min(1.0, max(0.0, p)), method, alternative, n + m)


def _tie_counts(values: Sequence[float]) -> list[int]:
    counts: dict[float, int] = {}
    for v in values:
        counts[v] = counts.get(v, 0) + 1
    return [c for c in counts.values() if c > 1]


# --- length study driver ---------------------------------------------------------


@dataclass(frozen=True)
class LengthRecord:
    record: str
    input_tokens: int
    avg_output_tokens: float
    correct: bool

    def __post_init__(self) -> None:
        if self.avg_output_tokens < 0 or self.input_tokens < 0:
            raise StatsError(f"record {self.record}: token lengths must be non-negative")


@dataclass(frozen=True)
class LengthAnalysisConfig:
    input_mw_alternative: str = TWO_SIDED
    output_mw_alternative: str = TWO_SIDED
    min_group_size: int = 3


def _attempt(fn, *args, **kwargs) -> dict[str, Any]:
    try:
        return fn(*args, **kwargs).to_dict()
    except StatsError as exc:
        return {"error": str(exc)}


def run_length_analysis(records: Sequence[LengthRecord], cfg: LengthAnalysisConfig | None = None) -> dict[str, Any]:
    """Outlier filtering, normality checks, correlation and group comparisons.

    The 3σ filter is applied to input and average-output lengths separately and
    a record is dropped when either value is an outlier; grouping by
    correctness happens afterwards. Mann–Whitney compares correct against
    incorrect, so ``greater`` means correct predictions have longer lengths.
    Individual test failures (e.g. zero variance) are reported in place.

    Raises:
        StatsError: when either correctness group has too few records.
    """
    cfg = cfg or LengthAnalysisConfig()
    if len(records) < 2:
        raise StatsError("length analysis needs at least 2 records")
    keep_in = three_sigma_mask([r.input_tokens for r in records])
    keep_out = three_sigma_mask([r.avg_output_tokens for r in records])
    kept = [r for r, a, b in zip(records, keep_in, keep_out) if a and b]
    groups = {"correct": [r for r in kept if r.correct], "incorrect": [r for r in kept if not r.correct]}
    for name, members in groups.items():
        if len(members) < cfg.min_group_size:
            raise StatsError(f"group '{name}' has {len(members)} record(s) after filtering; "
                             f"need at least {cfg.min_group_size}")

    tests: dict[str, Any] = {}
    for var in ("input_tokens", "avg_output_tokens"):
        for name, members in groups.items():
            tests[f"shapiro_{var}_{name}"] = _attempt(shapiro_wilk, [getattr(r, var) for r in members])
    tests["spearman_input_vs_output"] = _attempt(
        spearman, [r.input_tokens for r in kept], [r.avg_output_tokens for r in kept])
    for var, alt in (("input_tokens", cfg.input_mw_alternative), ("avg_output_tokens", cfg.output_mw_alternative)):
        tests[f"mannwhitney_{var}"] = _attempt(
            mann_whitney, [getattr(r, var) for r in groups["correct"]],
            [getattr(r, var) for r in groups["incorrect"]], alt)
    return {
        "n_records": len(records),
        "n_retained": len(kept),
        "removed_input_outliers": keep_in.count(False),
        "removed_output_outliers": keep_out.count(False),
        "group_sizes": {k: len(v) for k, v in groups.items()},
        "config": asdict(cfg),
        "tests": tests,
        "retained_records": [r.record for r in kept],
    }


def scatter_csv(records: Sequence[LengthRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["record", "input_tokens", "avg_output_tokens", "correct"])
    for r in records:
        writer.writerow([r.record, r.input_tokens, f"{r.avg_output_tokens:.4f}", int(r.correct)])
    return buf.getvalue()
