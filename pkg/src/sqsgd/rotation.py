"""Randomized Hadamard rotation shared by server and clients through a public seed."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np


def padded_dimension(r: float, d: int) -> int:
    """``2 ** ceil(log2(r * d))``, and at least 1."""
    if not 0 < r <= 1:
        raise ValueError(f"sampling ratio must lie in (0, 1], got {r}")
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    target = r * d
    # r*d computed as e.g. (256/7850)*7850 can land a hair above 256
    target *= 1.0 - 1e-12
    if target <= 1:
        return 1
    return 1 << math.ceil(math.log2(target))


def fwht(x: np.ndarray) -> np.ndarray:
    """In-place unnormalized Walsh-Hadamard transform along the last axis.

    Uses Sylvester ordering, so ``fwht(e_0)`` is all ones. Returns ``x``.
    """
    n = x.shape[-1]
    if n & (n - 1):
        raise ValueError(f"length must be a power of two, got {n}")
    lead = x.shape[:-1]
    h = 1
    while h < n:
        y = x.reshape(*lead, n // (2 * h), 2, h)
        a = y[..., 0, :].copy()
        b = y[..., 1, :]
        y[..., 0, :] += b
        np.subtract(a, b, out=b)
        h *= 2
    return x


@dataclass(frozen=True)
class RotationPlan:
    dtilde: int
    seed: int

    def __post_init__(self):
        if self.dtilde < 1 or self.dtilde & (self.dtilde - 1):
            raise ValueError(f"dtilde must be a power of two, got {self.dtilde}")

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.dtilde)

    @cached_property
    def signs(self) -> np.ndarray:
        """The Rademacher diagonal, reproducible from the seed."""
        rng = np.random.default_rng(self.seed)
        out = np.where(rng.random(self.dtilde) < 0.5, -1.0, 1.0)
        out.setflags(write=False)
        return out


def make_plan(r: float, d: int, seed: int) -> RotationPlan:
    return RotationPlan(padded_dimension(r, d), int(seed))


def _check(x, plan):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != plan.dtilde:
        raise ValueError(f"expected length {plan.dtilde}, got {x.shape[-1]} (zero-pad first)")
    return x


def rotate(x, plan: RotationPlan, out: np.ndarray | None = None) -> np.ndarray:
    """``H A x / sqrt(dtilde)``; accepts a batch of rows."""
    x = _check(x, plan)
    if out is None:
        out = np.multiply(x, plan.signs)
    else:
        np.multiply(x, plan.signs, out=out)
    fwht(out)
    out *= plan.scale
    return out


def inverse_rotate(x, plan: RotationPlan, out: np.ndarray | None = None) -> np.ndarray:
    x = _check(x, plan)
    if out is None:
        out = x.copy()
    elif out is not x:
        out[...] = x
    fwht(out)
    out *= plan.scale
    out *= plan.signs
    return out


def clip_l2(x, U: float) -> np.ndarray:
    """Project onto the l2 ball of radius ``U``."""
    if not U > 0:
        raise ValueError(f"U must be positive, got {U}")
    x = np.asarray(x, dtype=np.float64)
    norm = float(np.linalg.norm(x))
    if norm <= U:
        return x
    return x * (U / norm)
