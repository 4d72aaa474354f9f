from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy.stats import norm, rankdata

from ..errors import DataError, ValidationError

# Speeds below this are excluded from MAPE.
MAPE_MIN_SPEED = 1.0
EXACT_MAX_N = 25
MIN_PAIRS = 5


@dataclasses.dataclass(frozen=True)
class Metrics:
    rmse: float
    mae: float
    mape: float


def metrics(y: np.ndarray, y_hat: np.ndarray) -> Metrics:
    """RMSE and MAE in mph, MAPE as a ratio over entries with y >= 1 mph."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape or y.ndim != 1:
        raise ValidationError("metrics need two vectors of equal length")
    if len(y) == 0:
        raise ValidationError("metrics need at least one pair")
    error = y_hat - y
    included = y >= MAPE_MIN_SPEED
    if not included.any():
        raise DataError(f"every true speed is below {MAPE_MIN_SPEED} mph; MAPE is undefined")
    return Metrics(
        rmse=float(np.sqrt(np.mean(error**2))),
        mae=float(np.mean(np.abs(error))),
        mape=float(np.mean(np.abs(error[included]) / y[included])),
    )


@dataclasses.dataclass(frozen=True)
class SignedRankResult:
    statistic: float
    p_value: float
    n: int
    exact: bool


def _exact_p(doubled_ranks: np.ndarray, doubled_statistic: int) -> float:
    # Number of sign patterns reaching each doubled W+; ranks are doubled so
    # average ranks of ties stay integral.
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for rank in doubled_ranks:
        shifted = counts.copy()
        shifted[rank:] += counts[: total + 1 - rank]
        counts = shifted
    lower_tail = counts[: doubled_statistic + 1].sum() / 2.0 ** len(doubled_ranks)
    return float(min(1.0, 2 * lower_tail))


def wilcoxon_signed_rank(a: np.ndarray, b: np.ndarray) -> SignedRankResult:
    """Two-sided Wilcoxon signed-rank test of paired samples.

    Zero differences are dropped and tied magnitudes share their average
    rank. The statistic is min(W+, W-). Up to 25 pairs the p-value comes from
    the exact null distribution; beyond, from the normal approximation with
    tie and continuity corrections.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("signed-rank test needs two vectors of equal length")
    diff = a - b
    diff = diff[diff != 0]
    n = len(diff)
    if n < MIN_PAIRS:
        raise DataError(f"signed-rank test needs {MIN_PAIRS} non-zero differences, got {n}")
    ranks = rankdata(np.abs(diff), method="average")
    w_plus = float(ranks[diff > 0].sum())
    w_minus = float(ranks[diff < 0].sum())
    statistic = min(w_plus, w_minus)
    if n <= EXACT_MAX_N:
        doubled = np.rint(2 * ranks).astype(int)
        p_value = _exact_p(doubled, int(round(2 * statistic)))
        return SignedRankResult(statistic, p_value, n, True)
    mean = n * (n + 1) / 4
    _, tie_counts = np.unique(ranks, return_counts=True)
    variance = n * (n + 1) * (2 * n + 1) / 24 - float(np.sum(tie_counts**3 - tie_counts)) / 48
    z = (statistic - mean + 0.5) / math.sqrt(variance)
    p_value = float(min(1.0, 2 * norm.cdf(z)))
    return SignedRankResult(statistic, p_value, n, False)
