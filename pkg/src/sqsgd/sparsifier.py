"""Random coordinate subsampling with residual accumulation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ClientResidual:
    """Unsent gradient mass. ``alpha`` weights what goes into the residual,
    ``beta`` weights the fresh gradient on the selected coordinates."""

    res: np.ndarray
    alpha: float = 1.0
    beta: float = 1.0

    @classmethod
    def zeros(cls, d: int, alpha: float = 1.0, beta: float = 1.0) -> "ClientResidual":
        return cls(np.zeros(d), alpha, beta)


def select_dims(d: int, dtilde: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform ``dtilde``-subset of ``range(d)``, sorted.

    Partial Fisher-Yates; the full selection draws no randomness.
    """
    if dtilde > d:
        raise ValueError(f"cannot select {dtilde} of {d} coordinates")
    if dtilde < 0:
        raise ValueError("dtilde must be non-negative")
    if dtilde == d:
        return np.arange(d, dtype=np.int64)
    perm = np.arange(d, dtype=np.int64)
    swaps = rng.integers(np.arange(dtilde), d)
    for i, j in enumerate(swaps.tolist()):
        perm[i], perm[j] = perm[j], perm[i]
    return np.sort(perm[:dtilde])


def extract_and_update(grad, residual: ClientResidual, dims) -> np.ndarray:
    """Return ``res[dims] + beta * grad[dims]`` and fold the rest into the residual.

    Afterwards ``res[dims] == 0`` and ``res[~dims] += alpha * grad[~dims]``.
    """
    grad = np.asarray(grad, dtype=np.float64)
    res = residual.res
    if grad.shape != res.shape:
        raise ValueError(f"gradient has shape {grad.shape}, residual {res.shape}")
    dims = np.asarray(dims, dtype=np.int64)
    payload = res[dims] + residual.beta * grad[dims]
    mask = np.ones(res.shape[0], dtype=bool)
    mask[dims] = False
    res[mask] += residual.alpha * grad[mask]
    res[dims] = 0.0
    return payload


def scatter(payload, dims, d: int) -> np.ndarray:
    payload = np.asarray(payload, dtype=np.float64)
    dims = np.asarray(dims, dtype=np.int64)
    if payload.shape != dims.shape:
        raise ValueError(f"{len(payload)} values for {len(dims)} indices")
    out = np.zeros(d)
    out[dims] = payload
    return out


def encode_dims(dims) -> bytes:
    """Wire form of an index set: uint32 count, then sorted uint32 indices, little-endian."""
    dims = np.sort(np.asarray(dims, dtype=np.int64))
    if dims.size and (dims[0] < 0 or dims[-1] >= 2**32):
        raise ValueError("index out of uint32 range")
    head = np.array([dims.size], dtype="<u4")
    return head.tobytes() + dims.astype("<u4").tobytes()


def decode_dims(data: bytes) -> np.ndarray:
    if len(data) < 4:
        raise ValueError("truncated index set")
    count = int(np.frombuffer(data[:4], dtype="<u4")[0])
    if len(data) != 4 + 4 * count:
        raise ValueError(f"index set declares {count} entries but carries {(len(data) - 4) // 4}")
    return np.frombuffer(data[4:], dtype="<u4").astype(np.int64)


def index_bits(count: int) -> int:
    return 32 * (1 + count)
