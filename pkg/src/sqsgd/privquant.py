"""The privatized quantization mechanism over the grid ``B^d``.

Given a quantized vector ``xhat``, the mechanism draws ``V`` uniformly from
the vectors agreeing with ``xhat`` in at least ``tau`` coordinates (with
probability ``p``) or uniformly from the rest (probability ``1 - p``), and
reports ``Z = V / m`` where ``m`` makes ``Z`` unbiased for ``xhat``.

Everything that depends on set sizes is computed in log space; see
:mod:`sqsgd.combinatorics`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .combinatorics import (
    log_binomial,
    log_diff_exp,
    log_tail_sum,
    matchcount_table,
)
from .quantizer import QuantGrid, QuantizedVector

# p = e^{a}/(1+e^{a}) spends `a` nats on the flip; the remaining share bounds
# the set-size ratio when picking the threshold.
THRESHOLD_SHARE = 0.9
FLIP_SHARE = 0.1

ENUMERATION_CAP = 10**6


class BudgetError(ValueError):
    """No ``(kappa, p)`` pair meets the privacy relation for the requested budget."""


class Budget(NamedTuple):
    kappa: int
    p: float
    # log(p / (1 - p)); p alone rounds to 1.0 once the log-odds pass ~37
    log_odds: float


def tau_for(d: int, kappa: int) -> int:
    """Minimum match count equivalent to ``#matches - #mismatches > kappa``."""
    return -(-(d + kappa + 1) // 2)


def kappa_for(d: int, tau: int) -> int:
    """Largest ``kappa`` whose threshold is ``tau``."""
    return 2 * tau - d - 1


def match_statistic(v1, v2) -> int:
    """``#{j: v1_j == v2_j} - #{j: v1_j != v2_j}``."""
    v1 = np.asarray(v1)
    v2 = np.asarray(v2)
    if v1.shape != v2.shape:
        raise ValueError("vectors must have the same shape")
    matches = int(np.count_nonzero(v1 == v2))
    return 2 * matches - v1.size


def log_set_sizes(d: int, K: int, tau: int) -> tuple[float, float]:
    """Log sizes of the high-match set (``>= tau`` matches) and its complement."""
    if not 1 <= tau <= d:
        raise ValueError(f"tau must lie in [1, d], got tau={tau}, d={d}")
    return log_tail_sum(d, K, tau, d), log_tail_sum(d, K, 0, tau - 1)


def log_count_ratio(d: int, K: int, tau: int) -> float:
    """``log(|low set| / |high set|)``; increasing in ``tau``."""
    log_hi, log_lo = log_set_sizes(d, K, tau)
    return log_lo - log_hi


def privacy_slack(d: int, K: int, kappa: int, log_odds: float, epsilon1: float) -> float:
    """``epsilon1`` minus the log of the left side of the privacy relation.

    ``log_odds`` is ``log(p / (1 - p))``. Non-negative exactly when
    ``(kappa, p)`` is ``epsilon1``-LDP.
    """
    tau = tau_for(d, kappa)
    return epsilon1 - (log_odds + log_count_ratio(d, K, tau))


def p_from_log_odds(a: float) -> float:
    return 1.0 / (1.0 + math.exp(-a))


def log_odds_of(p: float) -> float:
    return math.log(p) - math.log1p(-p)


def _log_p_pair(log_odds: float) -> tuple[float, float]:
    # (log p, log(1 - p))
    t = math.log1p(math.exp(-log_odds))
    return -t, -log_odds - t


def solve_budget(d: int, K: int, epsilon1: float) -> Budget:
    """Pick ``(kappa, p)`` for dimension ``d``, ``K`` levels and budget ``epsilon1``.

    ``p`` spends a tenth of the budget on the log-odds, and ``kappa`` is the
    largest threshold whose set-size ratio stays within the other nine tenths.
    The ratio is monotone in the threshold, so this is a binary search.

    When no ``kappa >= 0`` fits, ``kappa = 0`` is kept with ``p`` solved from
    equality at the full budget, provided that ``p >= 1/2``. Failing that, the
    search continues over negative ``kappa``. The low-match set is then the
    smaller one, and the mechanism stays unbiased and ``epsilon1``-LDP as long
    as ``m > 0``; when the usual split cannot keep ``m`` positive, the odds
    take whatever budget the set-size ratio leaves.
    """
    if not epsilon1 > 0:
        raise ValueError(f"epsilon1 must be positive, got {epsilon1}")
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")

    bound = THRESHOLD_SHARE * epsilon1
    split = FLIP_SHARE * epsilon1
    tau0 = tau_for(d, 0)

    def fits(tau):
        return log_count_ratio(d, K, tau) <= bound

    if fits(tau0):
        lo, hi = tau0, d
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if fits(mid):
                lo = mid
            else:
                hi = mid - 1
        return Budget(min(kappa_for(d, lo), d - 1), p_from_log_odds(split), split)

    ratio0 = log_count_ratio(d, K, tau0)
    if ratio0 <= epsilon1:
        a = epsilon1 - ratio0
        return Budget(0, p_from_log_odds(a), a)

    if fits(1):
        lo, hi = 1, tau0 - 1
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if fits(mid):
                lo = mid
            else:
                hi = mid - 1
    elif log_count_ratio(d, K, 1) <= epsilon1:
        lo = 1
    else:
        raise BudgetError(
            f"no (kappa, p) with p >= 1/2 satisfies the privacy relation for d={d}, K={K}, epsilon1={epsilon1}"
        )
    # m > 0 needs the odds to beat the set-size ratio |high|/|low|
    ratio = log_count_ratio(d, K, lo)
    a = split if ratio <= bound and split + ratio > 0 else epsilon1 - ratio
    return Budget(kappa_for(d, lo), p_from_log_odds(a), a)


def log_normalizer(d: int, K: int, kappa: int, p: float | None = None, *, log_odds: float | None = None) -> float:
    """Log of the normalizing factor ``m`` with ``E[V] = m * xhat``.

    ``m = a (p/|high| - (1-p)/|low|)`` where ``a = C(d-1, tau-1) (K-1)^(d-tau)``.
    Pass ``log_odds`` instead of ``p`` when ``p`` is within round-off of 1.
    """
    tau = tau_for(d, kappa)
    if not 1 <= tau <= d:
        raise ValueError(f"threshold out of range: kappa={kappa}, d={d}")
    if log_odds is None:
        if p is None or not 0 < p < 1:
            raise ValueError(f"p must lie in (0, 1), got {p}")
        log_odds = log_odds_of(p)
    log_p, log_q = _log_p_pair(log_odds)
    log_hi, log_lo = log_set_sizes(d, K, tau)
    log_a = log_binomial(d - 1, tau - 1) + (d - tau) * math.log(K - 1)
    first = log_p - log_hi
    second = log_q - log_lo
    if not first > second:
        raise ValueError(
            f"normalizing factor is not positive for d={d}, K={K}, kappa={kappa}, log_odds={log_odds}"
        )
    return log_a + log_diff_exp(first, second)


def exact_normalizer(d: int, K: int, kappa: int, p) -> Fraction:
    """Exact rational ``m`` via big-integer set sizes (small ``d`` only)."""
    tau = tau_for(d, kappa)
    p = Fraction(p)
    hi = sum(math.comb(d, l) * (K - 1) ** (d - l) for l in range(tau, d + 1))
    lo = sum(math.comb(d, l) * (K - 1) ** (d - l) for l in range(0, tau))
    a = math.comb(d - 1, tau - 1) * (K - 1) ** (d - tau)
    return Fraction(a) * (p / hi - (1 - p) / lo)


@dataclass(frozen=True)
class PrivacyParams:
    """Solved mechanism configuration for one dimension.

    ``epsilon = epsilon1 + epsilon2``; ``epsilon2`` is the share kept for the
    norm estimate.
    """

    d: int
    K: int
    epsilon: float
    epsilon1: float
    epsilon2: float
    kappa: int
    log_odds: float
    tau: int
    log_m: float

    def __post_init__(self):
        if not math.isclose(self.epsilon, self.epsilon1 + self.epsilon2, rel_tol=1e-12, abs_tol=1e-12):
            raise ValueError("epsilon must equal epsilon1 + epsilon2")
        if self.tau != tau_for(self.d, self.kappa):
            raise ValueError("tau inconsistent with kappa")
        if not self.log_odds >= 0:
            raise ValueError(f"p must lie in [1/2, 1), got log-odds {self.log_odds}")
        # 1e-9 absorbs log-space round-off at d ~ 1e5
        if self.slack < -1e-9:
            raise ValueError(f"(kappa={self.kappa}, p={self.p}) violates the privacy relation")
        if not math.isfinite(self.log_m):
            raise ValueError("normalizing factor must be positive")

    @property
    def p(self) -> float:
        return p_from_log_odds(self.log_odds)

    @property
    def q(self) -> float:
        """``1 - p``, computed without cancellation."""
        return p_from_log_odds(-self.log_odds)

    @property
    def m(self) -> float:
        return math.exp(self.log_m)

    @property
    def slack(self) -> float:
        return privacy_slack(self.d, self.K, self.kappa, self.log_odds, self.epsilon1)

    @property
    def log_high_size(self) -> float:
        return log_tail_sum(self.d, self.K, self.tau, self.d)

    @property
    def log_low_size(self) -> float:
        return log_tail_sum(self.d, self.K, 0, self.tau - 1)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["p"] = self.p
        out["m"] = self.m
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "PrivacyParams":
        names = cls.__dataclass_fields__
        return cls(**{k: v for k, v in data.items() if k in names})


def make_params(d: int, K: int, epsilon: float, epsilon2: float = 0.0) -> PrivacyParams:
    """Solve ``(kappa, p)`` and ``m`` for the budget ``epsilon - epsilon2``."""
    if not 0 <= epsilon2 < epsilon:
        raise ValueError(f"need 0 <= epsilon2 < epsilon, got epsilon={epsilon}, epsilon2={epsilon2}")
    epsilon1 = epsilon - epsilon2
    kappa, _, log_odds = solve_budget(d, K, epsilon1)
    return PrivacyParams(
        d=d,
        K=K,
        epsilon=epsilon,
        epsilon1=epsilon1,
        epsilon2=epsilon2,
        kappa=kappa,
        log_odds=log_odds,
        tau=tau_for(d, kappa),
        log_m=log_normalizer(d, K, kappa, log_odds=log_odds),
    )


def params_from(d: int, K: int, kappa: int, p: float, epsilon1: float | None = None) -> PrivacyParams:
    """Build params for an explicit ``(kappa, p)``; ``epsilon1`` defaults to the
    tightest budget the pair satisfies."""
    tau = tau_for(d, kappa)
    log_odds = log_odds_of(p)
    if epsilon1 is None:
        epsilon1 = log_odds + log_count_ratio(d, K, tau)
    return PrivacyParams(d, K, epsilon1, epsilon1, 0.0, kappa, log_odds, tau, log_normalizer(d, K, kappa, log_odds=log_odds))


def sample_levels(xhat_levels, params: PrivacyParams, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw privatized level vectors for ``xhat_levels``.

    Two stages: the match count ``l`` from its exact law on the chosen side of
    the threshold, a uniform ``l``-subset of coordinates to keep, and a
    uniform pick among the other ``K - 1`` levels for each remaining
    coordinate. Returns shape ``(d,)``, or ``(size, d)`` when ``size`` is given.
    """
    x = np.asarray(xhat_levels, dtype=np.int64)
    d, K, tau = params.d, params.K, params.tau
    if x.shape != (d,):
        raise ValueError(f"expected {d} level indices, got shape {x.shape}")
    n = 1 if size is None else int(size)

    # one inverse-CDF pass over both sides of the threshold
    hi_counts, hi_cdf = matchcount_table(d, K, tau, d)
    tables_counts, tables_cdf = [hi_counts], [params.p * hi_cdf]
    if tau > 0 and params.q > 0:
        lo_counts, lo_cdf = matchcount_table(d, K, 0, tau - 1)
        tables_counts.append(lo_counts)
        tables_cdf.append(params.p + params.q * lo_cdf)
    table = np.concatenate(tables_counts)
    cdf = np.concatenate(tables_cdf)
    idx = np.searchsorted(cdf, rng.random(n), side="right")
    counts = table[np.minimum(idx, len(table) - 1)]

    # selection sampling: keep coordinate j with prob (still needed)/(left);
    # coordinate-major so each step touches one contiguous row
    u = rng.random((d, n))
    keep = np.empty((d, n), dtype=bool)
    need = counts.astype(np.float64)
    for j in range(d):
        row = u[j]
        row *= d - j
        np.less(row, need, out=keep[j])
        need -= keep[j]

    dtype = np.min_scalar_type(K - 1) if K <= 2**31 else np.int64
    col = x.astype(dtype)[:, None]
    if K > 2:
        other = rng.integers(0, K - 1, size=(d, n), dtype=dtype)
        other += other >= col
    else:
        other = np.broadcast_to(1 - col, (d, n))
    out = np.where(keep, col.astype(np.int64), other).T
    return out[0] if size is None else out


def privatize(xhat: QuantizedVector, params: PrivacyParams, rng: np.random.Generator):
    """Run the mechanism on one quantized vector.

    Returns ``(V, Z)``: ``V`` as a :class:`QuantizedVector` on the same grid and
    ``Z = decode(V) / m``, an unbiased estimate of ``decode(xhat)``.
    """
    if len(xhat) != params.d:
        raise ValueError(f"dimension mismatch: vector has {len(xhat)}, params expect {params.d}")
    if xhat.grid.K != params.K:
        raise ValueError(f"grid has K={xhat.grid.K}, params expect K={params.K}")
    v = QuantizedVector(sample_levels(xhat.level_indices, params, rng), xhat.grid)
    return v, v.decode() / params.m


def encode_index(levels, K: int) -> np.ndarray:
    """Base-``K`` index of level vectors, coordinate 0 least significant."""
    levels = np.asarray(levels)
    out = np.zeros(levels.shape[:-1], dtype=np.int64)
    for j in range(levels.shape[-1] - 1, -1, -1):
        out *= K
        out += levels[..., j]
    return out


def enumerate_levels(d: int, K: int) -> np.ndarray:
    """All ``K**d`` level vectors, row ``i`` having ``encode_index == i``."""
    idx = np.arange(K**d, dtype=np.int64)
    return (idx[:, None] // (K ** np.arange(d, dtype=np.int64))) % K


def exact_pmf(xhat_levels, params: PrivacyParams) -> np.ndarray:
    """Exact law of the privatized levels, indexed by :func:`encode_index`.

    Only for ``K**d <= ENUMERATION_CAP``.
    """
    d, K, tau = params.d, params.K, params.tau
    if K**d > ENUMERATION_CAP:
        raise ValueError(f"K**d = {K**d} exceeds the enumeration cap {ENUMERATION_CAP}")
    x = np.asarray(xhat_levels, dtype=np.int64)
    if x.shape != (d,):
        raise ValueError(f"expected {d} level indices, got shape {x.shape}")
    n_high = sum(math.comb(d, l) * (K - 1) ** (d - l) for l in range(tau, d + 1))
    n_low = K**d - n_high
    matches = (enumerate_levels(d, K) == x).sum(axis=1)
    in_high = matches >= tau
    pmf = np.where(in_high, params.p / n_high, params.q / n_low if n_low else 0.0)
    return pmf


def reconstruction_protection(epsilon: float, rho0: float, recon_rank: int, a: float) -> tuple[float, float]:
    """Reconstruction-protection level for an orthogonal attack of rank ``recon_rank``.

    Returns ``(omega, radius)``: no estimator gets within squared error
    ``radius = sqrt(2) - 2a`` of the normalized target with probability above
    ``omega``. Priors are limited to log-density ``rho0`` over uniform.
    """
    if recon_rank < 2:
        raise ValueError("recon_rank must be >= 2")
    if not 0 <= a <= 1:
        raise ValueError("a must lie in [0, 1]")
    if rho0 < 0:
        raise ValueError("rho0 must be non-negative")
    log_omega = 0.5 * math.log(8.0) - (recon_rank - 1) * a * a / 2.0 + epsilon + rho0
    omega = math.exp(log_omega) if log_omega < 709 else math.inf
    return omega, math.sqrt(2.0) - 2.0 * a

