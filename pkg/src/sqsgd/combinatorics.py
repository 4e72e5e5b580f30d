"""Log-space combinatorial kernels.

Everything here works with natural-log weights so that sums of the form
``sum_l C(d, l) * (K-1)**(d-l)`` stay finite for dimensions in the millions.
``LOG_ZERO`` (``-inf``) is the log of an empty sum.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy.special import gammaln

LOG_ZERO = -math.inf

# Buckets whose weight is this far (in nats) below the largest one carry
# less than 1e-26 of the mass and are dropped from sampling tables.
_SAMPLER_LOG_CUTOFF = 60.0


def log_binomial(n: int, k: int) -> float:
    """Return ``log C(n, k)``, or ``LOG_ZERO`` when ``k`` is outside ``[0, n]``."""
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    if k < 0 or k > n:
        return LOG_ZERO
    if k == 0 or k == n:
        return 0.0
    return math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)


@lru_cache(maxsize=16)
def _log_factorials(n: int) -> np.ndarray:
    # log(i!) for i = 0..n
    out = gammaln(np.arange(n + 1, dtype=np.float64) + 1.0)
    out.setflags(write=False)
    return out


def log_bucket_weights(d: int, K: int, lo: int, hi: int) -> np.ndarray:
    """Log weights ``log C(d, l) + (d-l) log(K-1)`` for ``l = lo..hi``."""
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    if not 0 <= lo <= hi <= d:
        raise ValueError(f"need 0 <= lo <= hi <= d, got lo={lo}, hi={hi}, d={d}")
    lf = _log_factorials(d)
    ells = np.arange(lo, hi + 1)
    w = lf[d] - lf[ells] - lf[d - ells]
    if K > 2:
        w = w + (d - ells) * math.log(K - 1)
    return w


def log_sum_exp(values) -> float:
    """Stable ``log(sum(exp(values)))`` with a compensated inner sum."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return LOG_ZERO
    top = float(values.max())
    if top == LOG_ZERO:
        return LOG_ZERO
    return top + math.log(math.fsum(np.exp(values - top)))


def log_diff_exp(a: float, b: float) -> float:
    """``log(exp(a) - exp(b))`` for ``a > b``."""
    if not a > b:
        raise ValueError(f"log_diff_exp needs a > b, got a={a}, b={b}")
    if b == LOG_ZERO:
        return a
    return a + math.log1p(-math.exp(b - a))


def log_tail_sum(d: int, K: int, lo: int, hi: int) -> float:
    """Log of ``sum_{l=lo}^{hi} C(d, l) (K-1)^(d-l)``.

    This counts the vectors in ``{1..K}^d`` that agree with a fixed vector in
    between ``lo`` and ``hi`` coordinates. The full range gives ``d log K``.
    """
    if lo > hi:
        raise ValueError(f"empty range: lo={lo} > hi={hi}")
    return log_sum_exp(log_bucket_weights(d, K, lo, hi))


def _kahan_cumsum(values: np.ndarray) -> np.ndarray:
    out = np.empty_like(values)
    total = 0.0
    comp = 0.0
    for i, v in enumerate(values.tolist()):
        y = v - comp
        t = total + y
        comp = (t - total) - y
        total = t
        out[i] = total
    return out


@lru_cache(maxsize=64)
def matchcount_table(d: int, K: int, lo: int, hi: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-CDF table for the match-count law on ``[lo, hi]``.

    Returns ``(counts, cdf)`` with buckets in descending-weight order and the
    cdf normalized so that its last entry is exactly 1.
    """
    logw = log_bucket_weights(d, K, lo, hi)
    order = np.argsort(-logw, kind="stable")
    logw = logw[order]
    keep = logw >= logw[0] - _SAMPLER_LOG_CUTOFF
    order, logw = order[keep], logw[keep]
    cdf = _kahan_cumsum(np.exp(logw - logw[0]))
    cdf /= cdf[-1]
    cdf[-1] = 1.0
    counts = (order + lo).astype(np.int64)
    counts.setflags(write=False)
    cdf.setflags(write=False)
    return counts, cdf


def sample_truncated_matchcount(d: int, K: int, lo: int, hi: int, rng: np.random.Generator, size=None):
    """Draw a match count ``l`` in ``[lo, hi]`` with probability proportional to
    ``C(d, l) (K-1)^(d-l)``.

    Returns a Python int when ``size`` is None, otherwise an int64 array.
    """
    if lo > hi:
        raise ValueError(f"empty range: lo={lo} > hi={hi}")
    counts, cdf = matchcount_table(d, K, lo, hi)
    u = rng.random(size)
    idx = np.searchsorted(cdf, u, side="right")
    idx = np.minimum(idx, len(counts) - 1)
    if size is None:
        return int(counts[idx])
    return counts[idx]
