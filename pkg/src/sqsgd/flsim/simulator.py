"""Cross-silo federated training with the private selective-quantization pipeline.

Every client takes part in every round. A round on the client side is:
batch gradient, l2 clip, coordinate selection with residual blend, re-clip,
rotation, quantization, privatization and a private norm estimate. The
server decodes, un-rotates, scatters, averages over clients, takes an SGD
step and shrinks the norm bound.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from ..config import RunConfig
from ..privquant import PrivacyParams, make_params, sample_levels
from ..quantizer import QuantGrid, pack_levels, quantize, unpack_levels
from ..rotation import RotationPlan, clip_l2, inverse_rotate, padded_dimension, rotate
from ..scalardp import NormBoundState, levels_for, scalar_dp, update_bound
from ..sparsifier import (
    ClientResidual,
    decode_dims,
    encode_dims,
    extract_and_update,
    index_bits,
    select_dims,
)
from .data import Dataset, Shard, load_idx_dataset, partition, synth_data
from .models import accuracy, build_model

log = logging.getLogger(__name__)

SCALAR_BITS = 64
FLOAT_BITS = 64

# spawn-key prefixes and per-client stream ids
_INIT, _PARTITION, _CLIENT = 0, 1, 2
BATCH, SELECT, QUANT, PRIVATIZE, NORM = range(5)


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``key`` under the master seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def rounds_per_epoch(n_train: int, clients: int, batch_size: int) -> int:
    """Rounds needed for the clients' batches to cover the training set once."""
    return math.ceil(n_train / (clients * batch_size))


@dataclass
class ClientState:
    client_id: int
    shard: Shard
    residual: ClientResidual


@dataclass(frozen=True)
class RoundMessage:
    """Client-to-server payload for one round."""

    round: int
    client: int
    payload: np.ndarray  # level indices of V, length dtilde
    dims: np.ndarray
    norm_estimate: float
    K: int
    loss: float = float("nan")  # simulator bookkeeping, not transmitted

    @property
    def dtilde(self) -> int:
        return len(self.payload)

    @property
    def payload_bits(self) -> int:
        return self.dtilde * max(1, math.ceil(math.log2(self.K)))

    @property
    def index_bits(self) -> int:
        return index_bits(len(self.dims))

    @property
    def total_bits(self) -> int:
        return self.payload_bits + self.index_bits + SCALAR_BITS

    def encode(self) -> bytes:
        """Wire form: header (round, client, K, dtilde as uint32), packed
        levels, index set, float64 norm estimate. Little-endian throughout."""
        header = struct.pack("<IIII", self.round, self.client, self.K, self.dtilde)
        body = pack_levels(self.payload, self.K)
        dims = encode_dims(self.dims)
        return header + body + dims + struct.pack("<d", self.norm_estimate)

    @classmethod
    def decode(cls, data: bytes) -> "RoundMessage":
        rnd, client, K, dtilde = struct.unpack_from("<IIII", data, 0)
        b = max(1, math.ceil(math.log2(K)))
        start = 16
        nbytes = (dtilde * b + 7) // 8
        payload = unpack_levels(data[start : start + nbytes], K, dtilde)
        rest = data[start + nbytes :]
        dims = decode_dims(rest[:-8])
        (norm,) = struct.unpack("<d", rest[-8:])
        return cls(rnd, client, payload, dims, norm, K)


@dataclass
class Pipeline:
    """Everything fixed for a run that client and server both need."""

    d: int
    n_select: int
    dtilde: int
    K: int
    plan: RotationPlan | None
    params: PrivacyParams | None
    epsilon2: float | None  # None: no norm estimate; inf: exact norms
    batch_size: int
    sparsify: bool = True
    clip_bound: float = 10.0

    @property
    def m(self) -> float:
        return self.params.m if self.params is not None else 1.0

    @property
    def k_scalar(self) -> int:
        if self.epsilon2 is None or math.isinf(self.epsilon2):
            return 2
        return levels_for(self.epsilon2)


def build_pipeline(config: RunConfig, d: int) -> Pipeline:
    dtilde = padded_dimension(config.sampling_ratio, d) if config.sparsify else padded_dimension(1.0, d)
    n_select = min(dtilde, d)
    params = None
    if config.private:
        eps2 = config.epsilon2 if config.shrinkage else 0.0
        params = make_params(dtilde, config.levels, config.epsilon, eps2)
    if not config.shrinkage:
        eps2 = None
    elif config.private:
        eps2 = config.epsilon2
    else:
        eps2 = math.inf
    plan = RotationPlan(dtilde, config.seed) if config.rotation else None
    return Pipeline(
        d, n_select, dtilde, config.levels, plan, params, eps2, config.batch_size, config.sparsify, config.initial_bound
    )


def encode_payload(vec, U_t: float, pipe: Pipeline, rngs) -> tuple[np.ndarray, float]:
    """Clip, pad, rotate, quantize and privatize a selected-coordinate vector.

    The l2 re-clip uses the fixed ``clip_bound``; the rotated coordinates are
    then clamped to the current quantization range ``[-U_t, U_t]``, which
    only bites once the bound has shrunk below ``clip_bound``. Returns the
    privatized level indices and the l-infinity norm of the rotated vector
    before clamping, the signal the norm estimate tracks.
    """
    clipped = clip_l2(vec, pipe.clip_bound)
    padded = np.zeros(pipe.dtilde)
    padded[: len(clipped)] = clipped
    rotated = rotate(padded, pipe.plan) if pipe.plan is not None else padded
    linf = float(np.max(np.abs(rotated))) if rotated.size else 0.0
    if linf > U_t:
        rotated = np.clip(rotated, -U_t, U_t)
    xhat = quantize(rotated, QuantGrid(pipe.K, U_t), rngs[QUANT])
    if pipe.params is None:
        levels = xhat.level_indices
    else:
        levels = sample_levels(xhat.level_indices, pipe.params, rngs[PRIVATIZE])
    return levels, linf


def client_round(state: ClientState, theta, U_t: float, model, pipe: Pipeline, rngs, t: int = 0) -> RoundMessage:
    shard = state.shard
    take = min(pipe.batch_size, len(shard))
    batch = rngs[BATCH].choice(len(shard), size=take, replace=False)
    loss, grad = model.loss_grad(theta, shard.inputs[batch], shard.labels[batch])
    if not np.all(np.isfinite(grad)) or not math.isfinite(loss):
        raise FloatingPointError(f"client {state.client_id}: non-finite gradient in round {t}")
    grad = clip_l2(grad, pipe.clip_bound)
    if pipe.sparsify:
        dims = select_dims(pipe.d, pipe.n_select, rngs[SELECT])
        vec = extract_and_update(grad, state.residual, dims)
    else:
        dims = np.arange(pipe.d, dtype=np.int64)
        vec = grad
    levels, linf = encode_payload(vec, U_t, pipe, rngs)
    norm_est = float("nan")
    if pipe.epsilon2 is not None:
        norm_est = scalar_dp(min(linf, U_t), pipe.epsilon2, pipe.k_scalar, U_t, rngs[NORM])
    return RoundMessage(t, state.client_id, levels, dims, norm_est, pipe.K, float(loss))


def decode_message(msg: RoundMessage, U_t: float, pipe: Pipeline) -> np.ndarray:
    """Dense d-dimensional unbiased gradient estimate carried by one message."""
    z = QuantGrid(pipe.K, U_t).decode(msg.payload) / pipe.m
    if pipe.plan is not None:
        z = inverse_rotate(z, pipe.plan)
    dense = np.zeros(pipe.d)
    dense[msg.dims] = z[: len(msg.dims)]
    return dense


def aggregate(messages, U_t: float, pipe: Pipeline) -> np.ndarray:
    if not messages:
        raise ValueError("no messages to aggregate")
    rounds = {m.round for m in messages}
    if len(rounds) != 1:
        raise ValueError(f"messages from mixed rounds: {sorted(rounds)}")
    total = np.zeros(pipe.d)
    for msg in sorted(messages, key=lambda m: m.client):
        total += decode_message(msg, U_t, pipe)
    return total / len(messages)


def server_round(messages, theta, lr: float, pipe: Pipeline, bound: NormBoundState) -> np.ndarray:
    """Apply one SGD step from the client messages and shrink the norm bound."""
    update = aggregate(messages, bound.U_t, pipe)
    new_theta = theta - lr * update
    if pipe.epsilon2 is not None:
        update_bound(bound, [m.norm_estimate for m in messages])
    else:
        bound.history.append(bound.U_t)
    return new_theta


@dataclass
class TrainResult:
    metrics: list = field(default_factory=list)
    theta: np.ndarray | None = None
    pipeline: Pipeline | None = None
    bound_history: list = field(default_factory=list)
    rounds_per_epoch: int = 0
    rounds: int = 0

    @property
    def final(self) -> dict:
        return self.metrics[-1] if self.metrics else {}


def load_dataset(config: RunConfig) -> Dataset:
    if config.uses_idx:
        return load_idx_dataset(
            config.train_images,
            config.train_labels,
            config.test_images,
            config.test_labels,
            classes=config.classes,
            n_train=config.n_train or None,
        )
    return synth_data(config.n_train, config.features, config.classes, config.data_seed, config.margin, config.n_test)


def total_rounds(config: RunConfig, n_train: int) -> tuple[int, int]:
    rpe = rounds_per_epoch(n_train, config.clients, config.batch_size)
    rounds = config.rounds or math.ceil(config.epochs * rpe)
    return rpe, rounds


def train(config: RunConfig, dataset: Dataset | None = None, on_round=None) -> TrainResult:
    """Run ``config`` and return per-round metrics.

    Metrics rows: round, epoch, train_loss, test_acc, U_t, uplink_bits_per_client.
    ``U_t`` is the bound in force during the round; ``train_loss`` is the
    mean client batch loss at the round's starting parameters.
    """
    if dataset is None:
        dataset = load_dataset(config)
    model = build_model(config.arch, dataset.features, dataset.classes, config.hidden)
    shards = partition(dataset.x_train, dataset.y_train, config.clients, stream(config.seed, _PARTITION))
    rpe, T = total_rounds(config, len(dataset.y_train))
    theta = model.init(stream(config.seed, _INIT))
    d = model.dim

    result = TrainResult(rounds_per_epoch=rpe, rounds=T)
    bound = NormBoundState(config.initial_bound)
    pipe = None
    if config.mode == "sqsgd":
        pipe = build_pipeline(config, d)
        result.pipeline = pipe
        log.info(
            "d=%d dtilde=%d K=%d m=%s kappa=%s",
            d, pipe.dtilde, pipe.K, pipe.m, pipe.params.kappa if pipe.params else None,
        )
    clients = [ClientState(s.owner, s, ClientResidual.zeros(d, config.alpha, config.beta)) for s in shards]

    bits = 0
    for t in range(T):
        U_t = bound.U_t
        if pipe is None:
            update, losses = _fedsgd_step(clients, theta, model, config, t)
            theta = theta - config.lr * update
            bound.history.append(U_t)
            bits += FLOAT_BITS * d
        else:
            messages = []
            for c in clients:
                rngs = [stream(config.seed, _CLIENT, t, c.client_id, k) for k in range(5)]
                messages.append(client_round(c, theta, U_t, model, pipe, rngs, t))
            losses = [m.loss for m in messages]
            theta = server_round(messages, theta, config.lr, pipe, bound)
            bits += messages[0].total_bits
        if not np.all(np.isfinite(theta)):
            raise FloatingPointError(f"parameters diverged in round {t}")
        last = t == T - 1
        acc = accuracy(model, theta, dataset.x_test, dataset.y_test) if (t + 1) % config.eval_every == 0 or last else float("nan")
        row = {
            "round": t,
            "epoch": (t + 1) / rpe,
            "train_loss": float(np.mean(losses)),
            "test_acc": acc,
            "U_t": U_t,
            "uplink_bits_per_client": bits,
        }
        result.metrics.append(row)
        if on_round is not None:
            on_round(row)
    result.theta = theta
    result.bound_history = list(bound.history)
    return result


def _fedsgd_step(clients, theta, model, config, t):
    grads, losses = [], []
    for c in clients:
        rng = stream(config.seed, _CLIENT, t, c.client_id, BATCH)
        take = min(config.batch_size, len(c.shard))
        batch = rng.choice(len(c.shard), size=take, replace=False)
        loss, grad = model.loss_grad(theta, c.shard.inputs[batch], c.shard.labels[batch])
        grads.append(grad)
        losses.append(loss)
    return np.mean(grads, axis=0), losses
