"""Private scalar estimates of the gradient norm and the shrinking norm bound."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


MAX_LEVELS = 2**16


def levels_for(epsilon2: float) -> int:
    """Number of scalar quantization levels, ``ceil(exp(epsilon2 / 3))``.

    Clamped to ``[2, MAX_LEVELS]``.
    """
    if not epsilon2 > 0:
        raise ValueError(f"epsilon2 must be positive, got {epsilon2}")
    if epsilon2 / 3.0 > math.log(MAX_LEVELS):
        return MAX_LEVELS
    return max(2, math.ceil(math.exp(epsilon2 / 3.0)))


def stay_probability(epsilon2: float, k: int) -> float:
    if math.isinf(epsilon2):
        return 1.0
    # e^eps / (e^eps + k - 1), overflow-safe
    return 1.0 / (1.0 + (k - 1) * math.exp(-epsilon2))


def debias(reported, epsilon2: float, k: int, bound: float):
    """Invert the k-ary randomized response in expectation.

    With stay probability ``q`` the reported level is ``x`` and otherwise
    uniform over the other ``k - 1`` levels, so
    ``E[reported] = x * (q - s) + s * total`` with ``s = (1 - q)/(k - 1)``.
    """
    q = stay_probability(epsilon2, k)
    s = (1.0 - q) / (k - 1)
    total = bound * k / 2.0  # sum of the k levels on [0, bound]
    return (np.asarray(reported, dtype=np.float64) - s * total) / (q - s)


def scalar_dp(x: float, epsilon2: float, k_levels: int, bound: float, rng: np.random.Generator, clamp: bool = True) -> float:
    """``epsilon2``-LDP unbiased estimate of ``x`` in ``[0, bound]``.

    ``x`` is stochastically rounded to one of ``k_levels`` equally spaced
    points on ``[0, bound]``, then passed through k-ary randomized response
    and debiased. The result is clamped to ``[0, bound]``, the only source
    of bias. ``epsilon2 = inf`` returns ``x`` untouched.
    """
    if not bound > 0:
        raise ValueError(f"bound must be positive, got {bound}")
    if not 0 <= x <= bound:
        raise ValueError(f"x={x} outside [0, {bound}]")
    if math.isinf(epsilon2):
        return float(x)
    if not epsilon2 > 0:
        raise ValueError(f"epsilon2 must be positive, got {epsilon2}")
    if k_levels < 2:
        raise ValueError(f"need at least 2 levels, got {k_levels}")
    k = int(k_levels)
    step = bound / (k - 1)
    pos = x / step
    lower = min(math.floor(pos), k - 2)
    level = lower + int(rng.random() < pos - lower)
    if rng.random() >= stay_probability(epsilon2, k):
        other = int(rng.integers(0, k - 1))
        level = other + (other >= level)
    est = float(debias(level * step, epsilon2, k, bound))
    if clamp:
        est = min(max(est, 0.0), bound)
    return est


@dataclass
class NormBoundState:
    U_t: float
    history: list = field(default_factory=list)

    def __post_init__(self):
        if not self.U_t > 0:
            raise ValueError(f"norm bound must be positive, got {self.U_t}")
        if not self.history:
            self.history.append(self.U_t)


def update_bound(state: NormBoundState, client_estimates) -> float:
    """Shrink the bound to the largest client estimate, never growing it.

    A round whose estimates are all zero leaves the bound where it was.
    """
    estimates = [float(e) for e in client_estimates]
    if not estimates:
        raise ValueError("no client estimates")
    top = max(estimates)
    new = min(state.U_t, top) if top > 0 else state.U_t
    state.U_t = new
    state.history.append(new)
    return new
