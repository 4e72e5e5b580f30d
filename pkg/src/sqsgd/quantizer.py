"""Stochastic K-level quantization onto a uniform grid on ``[-U, U]``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Floating slack tolerated on the range check; coordinates inside it are
# clamped onto the boundary levels.
_RANGE_RTOL = 1e-9


@dataclass(frozen=True)
class QuantGrid:
    K: int
    U: float

    def __post_init__(self):
        if self.K < 2:
            raise ValueError(f"K must be >= 2, got {self.K}")
        if not self.U > 0:
            raise ValueError(f"U must be positive, got {self.U}")

    @property
    def step(self) -> float:
        return 2.0 * self.U / (self.K - 1)

    @property
    def levels(self) -> np.ndarray:
        return self.decode(np.arange(self.K))

    @property
    def bits_per_level(self) -> int:
        return max(1, math.ceil(math.log2(self.K)))

    def decode(self, level_indices) -> np.ndarray:
        """Map 0-based level indices to grid values."""
        k = np.asarray(level_indices, dtype=np.float64)
        return -self.U + k * self.step


def make_grid(K: int, U: float) -> QuantGrid:
    return QuantGrid(int(K), float(U))


@dataclass(frozen=True)
class QuantizedVector:
    """Level indices (0-based, so level ``k`` decodes to ``B_{k+1}``) plus the
    grid that interprets them."""

    level_indices: np.ndarray
    grid: QuantGrid

    def __len__(self):
        return len(self.level_indices)

    def decode(self) -> np.ndarray:
        return self.grid.decode(self.level_indices)

    @property
    def nbits(self) -> int:
        return len(self.level_indices) * self.grid.bits_per_level

    def pack(self) -> bytes:
        return pack_levels(self.level_indices, self.grid.K)


def quantize(x, grid: QuantGrid, rng: np.random.Generator) -> QuantizedVector:
    """Unbiased stochastic rounding of each coordinate to a neighbouring level.

    A coordinate in bin ``[B_k, B_{k+1})`` rounds up with probability
    ``(x - B_k) / (B_{k+1} - B_k)``. Grid points, including ``+U``, map to
    themselves deterministically.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("quantize expects a 1-D vector")
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    U = grid.U
    if x.size and np.max(np.abs(x)) > U * (1.0 + _RANGE_RTOL):
        raise ValueError(f"coordinate outside [-U, U] with U={U}; clip before quantizing")
    pos = (np.clip(x, -U, U) + U) / grid.step
    # snap values within round-off of a level so grid points stay deterministic
    nearest = np.rint(pos)
    pos = np.where(np.abs(pos - nearest) < 1e-9, nearest, pos)
    lower = np.minimum(np.floor(pos), grid.K - 2)
    frac = pos - lower
    up = rng.random(x.shape) < frac
    levels = (lower + up).astype(np.int64)
    return QuantizedVector(levels, grid)


def pack_levels(levels, K: int) -> bytes:
    """Little-endian bit packing of ``ceil(log2 K)``-bit level indices, coordinate-major."""
    levels = np.asarray(levels, dtype=np.int64)
    b = max(1, math.ceil(math.log2(K)))
    if levels.size and (levels.min() < 0 or levels.max() >= K):
        raise ValueError("level index out of range")
    bits = ((levels[:, None] >> np.arange(b)) & 1).astype(np.uint8).ravel()
    return np.packbits(bits, bitorder="little").tobytes()


def unpack_levels(data: bytes, K: int, n: int) -> np.ndarray:
    b = max(1, math.ceil(math.log2(K)))
    need = (n * b + 7) // 8
    if len(data) < need:
        raise ValueError(f"need {need} bytes for {n} levels, got {len(data)}")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")[: n * b]
    return (bits.reshape(n, b).astype(np.int64) << np.arange(b)).sum(axis=1)
