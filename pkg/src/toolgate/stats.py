"""Exact, dependency-free statistics for the evaluation reports.

McNemar uses the exact two-sided binomial test on the discordant pairs
when b + c < 25 and the continuity-corrected chi-square otherwise; the
chi-square(1) upper tail is erfc(sqrt(x/2)), which the stdlib computes to
well under the 1e-10 relative error the reports need.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

EXACT_THRESHOLD = 25


@dataclass(frozen=True)
class PairedOutcomes:
    """Per-item boolean outcomes under two conditions on the same items."""

    a: int  # both true
    b: int  # A true, B false
    c: int  # A false, B true
    d: int  # both false

    @staticmethod
    def from_pairs(pairs: list[tuple[bool, bool]]) -> "PairedOutcomes":
        a = sum(1 for x, y in pairs if x and y)
        b = sum(1 for x, y in pairs if x and not y)
        c = sum(1 for x, y in pairs if not x and y)
        d = sum(1 for x, y in pairs if not x and not y)
        return PairedOutcomes(a, b, c, d)

    @property
    def n(self) -> int:
        return self.a + self.b + self.c + self.d


@dataclass(frozen=True)
class McNemarResult:
    b: int
    c: int
    method: str  # exact_binomial | chi2_cc
    p_value: float
    statistic: float | None = None


def chi2_1df_sf(x: float) -> float:
    """Upper tail of the chi-square distribution with one degree of freedom."""
    if x < 0:
        raise ValueError("chi-square statistic must be nonnegative")
    return math.erfc(math.sqrt(x / 2.0))


def mcnemar(pairs: PairedOutcomes) -> McNemarResult:
    """Paired McNemar test on the discordant cells.

    b + c = 0 gives p = 1.0; small discordant counts use the exact
    two-sided binomial sum, larger ones the continuity-corrected
    chi-square. Symmetric in (b, c) by construction.
    """
    if pairs.n < 1:
        raise ValueError("McNemar needs at least one pair")
    b, c = pairs.b, pairs.c
    m = b + c
    if m == 0:
        return McNemarResult(b=b, c=c, method="exact_binomial", p_value=1.0)
    if m < EXACT_THRESHOLD:
        k = min(b, c)
        tail = Fraction(sum(math.comb(m, i) for i in range(k + 1)), 2**m)
        p = min(Fraction(1), 2 * tail)
        return McNemarResult(b=b, c=c, method="exact_binomial", p_value=float(p))
    stat = (abs(b - c) - 1) ** 2 / m
    return McNemarResult(b=b, c=c, method="chi2_cc", p_value=chi2_1df_sf(stat), statistic=stat)


def pass_hat_1(successes: int, total: int) -> Fraction:
    """First-attempt completion fraction, exact."""
    if total < 1:
        raise ValueError("total must be at least 1")
    if not 0 <= successes <= total:
        raise ValueError("successes must lie in [0, total]")
    return Fraction(successes, total)


@dataclass(frozen=True)
class KappaResult:
    kappa: float
    ci_low: float
    ci_high: float
    p_observed: float
    p_expected: float


def cohen_kappa(labels_a: list, labels_b: list) -> KappaResult:
    """Chance-corrected agreement with a large-sample 95% interval.

    The variance is the Fleiss-Cohen-Everitt asymptotic form; the interval
    is clamped to [-1, 1]. Identical degenerate lists (p_e = p_o = 1)
    define kappa = 1.
    """
    if len(labels_a) != len(labels_b):
        raise ValueError("label lists must have equal length")
    n = len(labels_a)
    if n == 0:
        raise ValueError("label lists must be nonempty")
    cats = sorted(set(labels_a) | set(labels_b), key=repr)
    idx = {cat: i for i, cat in enumerate(cats)}
    k = len(cats)
    counts = [[0] * k for _ in range(k)]
    for x, y in zip(labels_a, labels_b):
        counts[idx[x]][idx[y]] += 1
    p = [[counts[i][j] / n for j in range(k)] for i in range(k)]
    row = [sum(p[i][j] for j in range(k)) for i in range(k)]
    col = [sum(p[i][j] for i in range(k)) for j in range(k)]
    p_o = sum(p[i][i] for i in range(k))
    p_e = sum(row[i] * col[i] for i in range(k))

    if p_e == 1.0:
        if p_o == 1.0:
            return KappaResult(kappa=1.0, ci_low=1.0, ci_high=1.0, p_observed=1.0, p_expected=1.0)
        # single shared category plus disagreement cannot occur: p_e = 1
        # forces both raters onto one category, which implies p_o = 1
        raise ValueError("degenerate contingency table")

    kappa = (p_o - p_e) / (1 - p_e)

    term1 = sum(
        p[i][i] * (1 - (row[i] + col[i]) * (1 - kappa)) ** 2 for i in range(k)
    )
    term2 = (1 - kappa) ** 2 * sum(
        p[i][j] * (col[i] + row[j]) ** 2 for i in range(k) for j in range(k) if i != j
    )
    term3 = (kappa - p_e * (1 - kappa)) ** 2
    var = (term1 + term2 - term3) / (n * (1 - p_e) ** 2)
    se = math.sqrt(max(var, 0.0))
    half = 1.959963984540054 * se
    return KappaResult(
        kappa=kappa,
        ci_low=max(-1.0, kappa - half),
        ci_high=min(1.0, kappa + half),
        p_observed=p_o,
        p_expected=p_e,
    )
