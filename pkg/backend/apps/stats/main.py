"""Statistical kit for cohort association tests and study analysis.

Contingency statistics (chi-square, Cramér's V, odds ratio) back the
investigators' cohort comparisons; Welch's t, the permutation test and the
leave-one-out sensitivity pass back the study-analysis CLI. Every function is
pure: same inputs, same outputs.
"""

import math
import logging
from itertools import combinations
from typing import Any, Callable, Iterable, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field
from scipy import special
from scipy import stats as scipy_stats

from config import SRC_LOG_LEVELS
from constants import ERROR_MESSAGES
from utils.errors import StatisticsError

log = logging.getLogger(__name__)
log.setLevel(SRC_LOG_LEVELS["STATS"])

__all__ = [
    "ContingencyTable",
    "ChiSquareResult",
    "WelchResult",
    "PermutationResult",
    "LeaveOneOutResult",
    "contingency_from_pairs",
    "chi_square",
    "cramers_v",
    "odds_ratio",
    "incomplete_beta",
    "incomplete_gamma_upper",
    "t_cdf",
    "t_ppf",
    "welch_t",
    "welch_from_samples",
    "leave_one_out",
    "permutation_test",
    "run_test",
]

EXACT_PERMUTATION_LIMIT = 1_000_000
DEFAULT_RESAMPLES = 10_000


####################
# Types
####################


class ContingencyTable(BaseModel):
    counts: list[list[int]]
    row_labels: list[str] = []
    col_labels: list[str] = []

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.counts), len(self.counts[0]) if self.counts else 0


class ChiSquareResult(BaseModel):
    stat: float
    dof: int
    p: float


class WelchResult(BaseModel):
    t: float
    df: float
    p_two_sided: float
    ci95: tuple[float, float]
    cohens_d: float
    diff: float
    se: float


class PermutationResult(BaseModel):
    p_two_sided: float
    n_as_extreme: int
    n_total: int
    observed: float
    mode: Literal["exact", "monte_carlo"]


class LeaveOneOutRow(BaseModel):
    omitted_group: Literal["a", "b"]
    omitted_index: int
    diff: float
    t: float
    p_two_sided: float


class LeaveOneOutResult(BaseModel):
    rows: list[LeaveOneOutRow]
    diff_range: tuple[float, float]
    t_range: tuple[float, float]
    p_range: tuple[float, float]
    all_significant: bool = Field(description="every omission keeps p < 0.05")


TableLike = ContingencyTable | Sequence[Sequence[int]]


####################
# Special functions
####################


def _finite(value: float, name: str) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise StatisticsError(ERROR_MESSAGES.NON_FINITE(name))
    return value


def incomplete_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    return _finite(special.betainc(a, b, x), "incomplete_beta")


def incomplete_gamma_upper(a: float, x: float) -> float:
    """Upper regularized incomplete gamma Q(a, x)."""
    return _finite(special.gammaincc(a, x), "incomplete_gamma")


def t_cdf(x: float, df: float) -> float:
    """Student-t CDF through the incomplete beta relation."""
    if df <= 0:
        raise StatisticsError(ERROR_MESSAGES.WELCH_PRECONDITION("df must be positive"))
    if x == 0:
        return 0.5
    tail = 0.5 * incomplete_beta(df / 2.0, 0.5, df / (df + x * x))
    return 1.0 - tail if x > 0 else tail


def t_ppf(q: float, df: float) -> float:
    return _finite(scipy_stats.t.ppf(q, df), "t_ppf")


####################
# Contingency statistics
####################


def _counts(table: TableLike) -> np.ndarray:
    counts = table.counts if isinstance(table, ContingencyTable) else table
    try:
        arr = np.asarray(counts, dtype=float)
    except (TypeError, ValueError):
        raise StatisticsError(ERROR_MESSAGES.NEGATIVE_COUNTS.value)
    if arr.ndim != 2 or arr.shape[0] < 2 or arr.shape[1] < 2:
        raise StatisticsError(ERROR_MESSAGES.TABLE_SHAPE(str(arr.shape)))
    if (arr < 0).any() or not np.equal(np.mod(arr, 1), 0).all():
        raise StatisticsError(ERROR_MESSAGES.NEGATIVE_COUNTS.value)
    return arr


def contingency_from_pairs(pairs: Iterable[tuple[Any, Any]]) -> ContingencyTable:
    """Cross-tabulate (row value, column value) pairs; labels sorted as strings."""
    pairs = [(str(r), str(c)) for r, c in pairs]
    rows = sorted({r for r, _ in pairs})
    cols = sorted({c for _, c in pairs})
    row_index = {label: i for i, label in enumerate(rows)}
    col_index = {label: i for i, label in enumerate(cols)}
    counts = [[0] * len(cols) for _ in rows]
    for r, c in pairs:
        counts[row_index[r]][col_index[c]] += 1
    return ContingencyTable(counts=counts, row_labels=rows, col_labels=cols)


def chi_square(table: TableLike) -> ChiSquareResult:
    """Pearson chi-square test of independence.

    Args:
        table: r x c table of non-negative integer counts, r, c >= 2.

    Returns:
        Statistic, degrees of freedom (r-1)(c-1) and the p-value Q(dof/2, stat/2).
    """
    obs = _counts(table)
    row_sums = obs.sum(axis=1)
    col_sums = obs.sum(axis=0)
    if (row_sums == 0).any() or (col_sums == 0).any():
        raise StatisticsError(ERROR_MESSAGES.ZERO_MARGINAL.value)

    n = obs.sum()
    expected = np.outer(row_sums, col_sums) / n
    stat = float(((obs - expected) ** 2 / expected).sum())
    dof = (obs.shape[0] - 1) * (obs.shape[1] - 1)
    p = incomplete_gamma_upper(dof / 2.0, stat / 2.0)
    return ChiSquareResult(stat=stat, dof=dof, p=min(1.0, max(0.0, p)))


def cramers_v(table: TableLike) -> float:
    obs = _counts(table)
    stat = chi_square(obs.tolist()).stat
    n = obs.sum()
    k = min(obs.shape) - 1
    return min(1.0, math.sqrt(stat / (n * k)))


def odds_ratio(table: TableLike) -> float:
    """(a*d)/(b*c) for a 2x2 table, with Haldane-Anscombe +0.5 when any cell is zero."""
    obs = _counts(table)
    if obs.shape != (2, 2):
        raise StatisticsError(ERROR_MESSAGES.NOT_2X2(str(obs.shape)))
    if (obs == 0).any():
        obs = obs + 0.5
    (a, b), (c, d) = obs
    return float((a * d) / (b * c))


####################
# Welch
####################


def welch_t(
    mean1: float, sd1: float, n1: int, mean2: float, sd2: float, n2: int
) -> WelchResult:
    """Welch's unequal-variance t-test from summary statistics.

    The difference is taken as mean2 - mean1, so a larger second group gives a
    positive t.

    Args:
        mean1: Mean of group 1.
        sd1: Sample standard deviation of group 1.
        n1: Size of group 1 (>= 2).
        mean2: Mean of group 2.
        sd2: Sample standard deviation of group 2.
        n2: Size of group 2 (>= 2).

    Returns:
        WelchResult with Welch-Satterthwaite df, two-sided p, 95% CI of the
        difference and Cohen's d on the pooled (average-variance) SD.
    """
    if n1 < 2 or n2 < 2:
        raise StatisticsError(ERROR_MESSAGES.WELCH_PRECONDITION("each group needs n >= 2"))
    if sd1 < 0 or sd2 < 0:
        raise StatisticsError(ERROR_MESSAGES.WELCH_PRECONDITION("standard deviations must be >= 0"))
    if sd1 == 0 and sd2 == 0:
        raise StatisticsError(ERROR_MESSAGES.WELCH_PRECONDITION("both standard deviations are 0"))

    v1 = sd1 * sd1 / n1
    v2 = sd2 * sd2 / n2
    se = math.sqrt(v1 + v2)
    diff = mean2 - mean1
    t = diff / se
    df = (v1 + v2) ** 2 / (v1 * v1 / (n1 - 1) + v2 * v2 / (n2 - 1))
    p = 2.0 * t_cdf(-abs(t), df)
    half_width = t_ppf(0.975, df) * se
    cohens_d = diff / math.sqrt((sd1 * sd1 + sd2 * sd2) / 2.0)

    return WelchResult(
        t=t,
        df=df,
        p_two_sided=min(1.0, p),
        ci95=(diff - half_width, diff + half_width),
        cohens_d=cohens_d,
        diff=diff,
        se=se,
    )


def welch_from_samples(a: Sequence[float], b: Sequence[float]) -> WelchResult:
    a_arr = np.asarray(a, dtype=float)
    b_arr = np.asarray(b, dtype=float)
    if len(a_arr) < 2 or len(b_arr) < 2:
        raise StatisticsError(ERROR_MESSAGES.WELCH_PRECONDITION("each group needs n >= 2"))
    return welch_t(
        float(a_arr.mean()),
        float(a_arr.std(ddof=1)),
        len(a_arr),
        float(b_arr.mean()),
        float(b_arr.std(ddof=1)),
        len(b_arr),
    )


def leave_one_out(a: Sequence[float], b: Sequence[float]) -> LeaveOneOutResult:
    """Re-run Welch's test with each observation omitted in turn.

    Groups need at least three observations so every omission leaves n >= 2.
    """
    if len(a) < 3 or len(b) < 3:
        raise StatisticsError(
            ERROR_MESSAGES.WELCH_PRECONDITION("leave-one-out needs n >= 3 per group")
        )

    rows: list[LeaveOneOutRow] = []
    for group, values in (("a", a), ("b", b)):
        for index in range(len(values)):
            reduced = list(values[:index]) + list(values[index + 1 :])
            result = (
                welch_from_samples(reduced, b) if group == "a" else welch_from_samples(a, reduced)
            )
            rows.append(
                LeaveOneOutRow(
                    omitted_group=group,
                    omitted_index=index,
                    diff=result.diff,
                    t=result.t,
                    p_two_sided=result.p_two_sided,
                )
            )

    diffs = [row.diff for row in rows]
    ts = [row.t for row in rows]
    ps = [row.p_two_sided for row in rows]
    return LeaveOneOutResult(
        rows=rows,
        diff_range=(min(diffs), max(diffs)),
        t_range=(min(ts), max(ts)),
        p_range=(min(ps), max(ps)),
        all_significant=max(ps) < 0.05,
    )


####################
# Permutation
####################


def _mean_difference(a: Sequence[float], b: Sequence[float]) -> float:
    return sum(a) / len(a) - sum(b) / len(b)


def permutation_test(
    group_a: Sequence[float],
    group_b: Sequence[float],
    mode: Literal["exact", "monte_carlo"] = "exact",
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    statistic: Optional[Callable[[Sequence[float], Sequence[float]], float]] = None,
) -> PermutationResult:
    """Two-sided permutation test on a two-group statistic (mean difference by default).

    Exact mode enumerates every relabeling that keeps the group sizes; when
    that exceeds one million relabelings it falls back to seeded Monte Carlo
    sampling.

    Returns:
        p = #{relabelings with |stat| >= |observed|} / n_total.
    """
    if not group_a or not group_b:
        raise StatisticsError(ERROR_MESSAGES.EMPTY_GROUP.value)

    statistic = statistic or _mean_difference
    pooled = [float(x) for x in list(group_a) + list(group_b)]
    n, k = len(pooled), len(group_a)
    observed = statistic(pooled[:k], pooled[k:])
    threshold = abs(observed) - 1e-12 * max(1.0, abs(observed))

    if mode == "exact" and math.comb(n, k) > EXACT_PERMUTATION_LIMIT:
        log.warning(
            f"{math.comb(n, k)} relabelings exceed the exact limit, switching to monte_carlo"
        )
        mode = "monte_carlo"

    n_as_extreme = 0
    if mode == "exact":
        n_total = 0
        all_indices = range(n)
        for chosen in combinations(all_indices, k):
            chosen_set = set(chosen)
            a = [pooled[i] for i in chosen]
            b = [pooled[i] for i in all_indices if i not in chosen_set]
            if abs(statistic(a, b)) >= threshold:
                n_as_extreme += 1
            n_total += 1
    else:
        rng = np.random.default_rng(seed)
        values = np.asarray(pooled)
        n_total = n_resamples
        for _ in range(n_resamples):
            perm = rng.permutation(n)
            a = values[perm[:k]].tolist()
            b = values[perm[k:]].tolist()
            if abs(statistic(a, b)) >= threshold:
                n_as_extreme += 1

    return PermutationResult(
        p_two_sided=n_as_extreme / n_total,
        n_as_extreme=n_as_extreme,
        n_total=n_total,
        observed=observed,
        mode=mode,
    )


####################
# Payload dispatch
####################


def run_test(payload: dict) -> dict:
    """
    Dispatch a JSON payload {"test": ..., ...} to the matching statistic.

    welch: {mean1, sd1, n1, mean2, sd2, n2} or {a: [...], b: [...]}
    welch_loo: {a, b}
    perm: {a, b, mode?, n_resamples?, seed?}
    chi2 / cramers_v / odds_ratio: {table: [[...], ...]}
    """
    test = payload.get("test")
    try:
        if test == "welch":
            if "a" in payload:
                result = welch_from_samples(payload["a"], payload["b"])
            else:
                result = welch_t(
                    payload["mean1"],
                    payload["sd1"],
                    payload["n1"],
                    payload["mean2"],
                    payload["sd2"],
                    payload["n2"],
                )
            return {"test": test, **result.model_dump()}
        if test == "welch_loo":
            return {"test": test, **leave_one_out(payload["a"], payload["b"]).model_dump()}
        if test == "perm":
            result = permutation_test(
                payload["a"],
                payload["b"],
                mode=payload.get("mode", "exact"),
                n_resamples=payload.get("n_resamples", DEFAULT_RESAMPLES),
                seed=payload.get("seed", 0),
            )
            return {"test": test, **result.model_dump()}
        if test == "chi2":
            return {"test": test, **chi_square(payload["table"]).model_dump()}
        if test == "cramers_v":
            return {"test": test, "value": cramers_v(payload["table"])}
        if test == "odds_ratio":
            return {"test": test, "value": odds_ratio(payload["table"])}
    except KeyError as e:
        raise StatisticsError(ERROR_MESSAGES.MISSING_FIELD(str(e)))
    raise StatisticsError(ERROR_MESSAGES.UNKNOWN_TEST(str(test)))
