"""2x2 contingency statistics: Fisher exact, Pearson chi-square, odds ratio, BH.

P-values carry their base-10 logarithm alongside the float so that values far
below the double range (which the float reports as 0 with ``underflow``
set) can still be ordered, adjusted and printed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

UNDERFLOW = 1e-300
UNDERFLOW_TEXT = "<1e-300"
_LN10 = math.log(10.0)
_TIE_SLACK = math.log1p(1e-7)


@dataclass(frozen=True)
class PValue:
    value: float
    log10: float

    @classmethod
    def from_log(cls, ln_p: float) -> "PValue":
        ln_p = min(float(ln_p), 0.0)
        log10 = ln_p / _LN10
        if log10 < -300:
            return cls(0.0, log10)
        return cls(min(1.0, math.exp(ln_p)), log10)

    @property
    def underflow(self) -> bool:
        return self.log10 < -300

    def surrogate(self) -> float:
        return UNDERFLOW if self.underflow else self.value

    def __float__(self) -> float:
        return self.value

    def display(self) -> str:
        return UNDERFLOW_TEXT if self.underflow else f"{self.value:.3g}"

    def to_json(self) -> float | str:
        return UNDERFLOW_TEXT if self.underflow else self.value


ONE = PValue(1.0, 0.0)


def _check_cells(*cells: int) -> None:
    for x in cells:
        if int(x) != x or x < 0:
            raise ValueError(f"cell counts must be non-negative integers, got {cells}")


def _log_choose(n: int, k: int) -> float:
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


def fisher_exact_two_sided(a: int, b: int, c: int, d: int) -> PValue:
    """Two-sided Fisher exact test on the table ((a, b), (c, d)).

    Sums the hypergeometric mass of every table with the observed margins
    whose probability does not exceed the observed one (relative slack
    1e-7).  Probabilities are accumulated relative to the observed table in
    log space, so no intermediate term underflows.
    """
    _check_cells(a, b, c, d)
    r1, r2, c1 = a + b, c + d, a + c
    n = r1 + r2
    c2 = n - c1
    if min(r1, r2, c1, c2) == 0:
        return ONE
    lo, hi = max(0, c1 - r2), min(r1, c1)
    # log pmf(x+1) - log pmf(x)
    up = np.arange(a, hi, dtype=float)
    step_up = np.log((r1 - up) * (c1 - up)) - np.log((up + 1) * (r2 - c1 + up + 1))
    down = np.arange(a, lo, -1, dtype=float)
    step_down = np.log(down * (r2 - c1 + down)) - np.log((r1 - down + 1) * (c1 - down + 1))
    rel = np.concatenate(([0.0], np.cumsum(step_up), np.cumsum(step_down)))
    kept = rel[rel <= _TIE_SLACK]
    top = kept.max()
    ln_mass = top + math.log(float(np.exp(kept - top).sum()))
    ln_obs = _log_choose(r1, a) + _log_choose(r2, c) - _log_choose(n, c1)
    return PValue.from_log(ln_obs + ln_mass)


def chi_square_statistic(a: int, b: int, c: int, d: int) -> float:
    """Pearson statistic without continuity correction (0 on a zero margin)."""
    _check_cells(a, b, c, d)
    r1, r2, c1, c2 = a + b, c + d, a + c, b + d
    denom = r1 * r2 * c1 * c2
    if denom == 0:
        return 0.0
    n = r1 + r2
    return n * (a * d - b * c) ** 2 / denom


def _ln_erfc(z: float) -> float:
    """ln erfc(z) for z >= 0, switching to the asymptotic series once erfc is tiny."""
    if z < 26.0:
        return math.log(math.erfc(z))
    # erfc(z) = exp(-z^2)/(z sqrt(pi)) * sum_k (-1)^k (2k-1)!! / (2z^2)^k
    t = 1.0 / (2.0 * z * z)
    term, total = 1.0, 1.0
    for k in range(1, 12):
        term *= -(2 * k - 1) * t
        total += term
    return -z * z - math.log(z * math.sqrt(math.pi)) + math.log(total)


def chi_square_p_from_statistic(x: float) -> PValue:
    """Upper tail of chi-square with one degree of freedom: erfc(sqrt(x/2))."""
    if x <= 0:
        return ONE
    return PValue.from_log(_ln_erfc(math.sqrt(x / 2.0)))


def chi_square_p(a: int, b: int, c: int, d: int) -> PValue:
    _check_cells(a, b, c, d)
    if a + b + c + d == 0:
        raise ValueError("empty table")
    return chi_square_p_from_statistic(chi_square_statistic(a, b, c, d))


def small_cell(a: int, b: int, c: int, d: int, limit: int = 5) -> bool:
    return min(a, b, c, d) < limit


def selected_test(a: int, b: int, c: int, d: int) -> tuple[str, PValue]:
    """Fisher when any observed cell is below 5, chi-square otherwise."""
    if small_cell(a, b, c, d):
        return "fisher", fisher_exact_two_sided(a, b, c, d)
    return "chi_square", chi_square_p(a, b, c, d)


@dataclass(frozen=True)
class OddsRatio:
    value: float | None
    infinite: bool
    ci_low: float | None = None
    ci_high: float | None = None

    def display(self) -> str:
        if self.infinite:
            return "inf (div. by 0)"
        return "undefined" if self.value is None else f"{self.value:.2f}"

    def to_json(self) -> dict:
        return {
            "value": self.value,
            "infinite": self.infinite,
            "ci95": None if self.ci_low is None else [self.ci_low, self.ci_high],
            "display": self.display(),
        }


def odds_ratio(a: int, b: int, c: int, d: int, z: float = 1.959963984540054) -> OddsRatio:
    """ad/bc with a Woolf log-scale interval when every cell is positive."""
    _check_cells(a, b, c, d)
    num, den = a * d, b * c
    if den == 0:
        if num > 0:
            return OddsRatio(None, True)
        return OddsRatio(None, False)
    value = num / den
    if min(a, b, c, d) == 0:
        return OddsRatio(value, False)
    log_or = math.log(value)
    se = math.sqrt(1 / a + 1 / b + 1 / c + 1 / d)
    return OddsRatio(value, False, math.exp(log_or - z * se), math.exp(log_or + z * se))


def bh_adjust(p_values: Sequence[float | PValue]) -> list[float]:
    """Benjamini-Hochberg step-up adjustment, returned in input order.

    Underflowed PValues enter as the 1e-300 surrogate.
    """
    raw = [p.surrogate() if isinstance(p, PValue) else float(p) for p in p_values]
    m = len(raw)
    order = sorted(range(m), key=lambda i: raw[i])
    out = [0.0] * m
    running = 1.0
    for rank in range(m, 0, -1):
        i = order[rank - 1]
        running = min(running, raw[i] * m / rank)
        out[i] = min(running, 1.0)
    return out


def bh_adjust_pvalues(p_values: Sequence[PValue]) -> list[PValue]:
    """The same step-up rule evaluated on log10 values, so nothing is lost to underflow."""
    m = len(p_values)
    order = sorted(range(m), key=lambda i: p_values[i].log10)
    out: list[PValue] = [ONE] * m
    running = 0.0
    for rank in range(m, 0, -1):
        i = order[rank - 1]
        running = min(running, p_values[i].log10 + math.log10(m / rank))
        out[i] = PValue.from_log(running * _LN10)
    return out


def decision_cosine_distance(u: Sequence[float], v: Sequence[float]) -> float | None:
    """1 - cos(u, v); None when either vector is all zeros."""
    if len(u) != len(v):
        raise ValueError("decision vectors differ in length")
    dot = sum(x * y for x, y in zip(u, v))
    nu2 = sum(x * x for x in u)
    nv2 = sum(y * y for y in v)
    if nu2 == 0 or nv2 == 0:
        return None
    # one square root of the product keeps identical vectors at exactly 0
    return min(2.0, max(0.0, 1.0 - dot / math.sqrt(nu2 * nv2)))
