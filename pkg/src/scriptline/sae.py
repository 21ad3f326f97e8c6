"""Sparse autoencoder that learns the visual dictionary.

A single sigmoid hidden layer is trained to reconstruct descriptor
vectors. The objective is

    J = (1/2N) sum_i ||decode(encode(x_i)) - x_i||^2
        + l2_weight * (||W1||_F^2 + ||W2||_F^2)
        + sparsity_weight * KL(target || mean hidden activation)

where KL is the elementwise Bernoulli divergence summed over hidden
units. Hidden activations are the codebook assignment weights used
downstream, one visual word per hidden unit. Training is plain
mini-batch gradient descent with momentum, fully determined by the
configured seed.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

log = logging.getLogger(__name__)

_SAE_MAGIC = b"SAE1"
_EPS = 1e-10


@dataclass
class SAEParams:
    """Encoder/decoder weights; w1 maps inputs (L) to hidden units (K)."""

    w1: np.ndarray  # (K, L)
    b1: np.ndarray  # (K,)
    w2: np.ndarray  # (L, K)
    b2: np.ndarray  # (L,)

    @property
    def input_size(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.w1.shape[0]


@dataclass
class SAETrainConfig:
    hidden_size: int = 500
    l2_weight: float = 0.1
    sparsity_weight: float = 1.0
    sparsity_target: float = 0.95
    epochs: int = 30
    learning_rate: float = 0.5
    batch_size: int = 256
    momentum: float = 0.9
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.sparsity_target < 1.0:
            raise ValueError("sparsity_target must lie in (0, 1)")
        if self.l2_weight < 0 or self.sparsity_weight < 0:
            raise ValueError("regularization weights must be >= 0")
        if self.hidden_size < 1:
            raise ValueError("hidden_size must be >= 1")


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_last_dim(v: np.ndarray, size: int, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != size:
        raise ValueError(f"{what}: expected last dimension {size}, got {v.shape}")
    return v


def encode(params: SAEParams, x: np.ndarray) -> np.ndarray:
    """Hidden activations sigmoid(W1 x + b1); accepts a vector or a batch."""
    x = _check_last_dim(x, params.input_size, "encode")
    return sigmoid(x @ params.w1.T + params.b1)


def decode(params: SAEParams, z: np.ndarray) -> np.ndarray:
    """Reconstruction sigmoid(W2 z + b2); accepts a vector or a batch."""
    z = _check_last_dim(z, params.hidden_size, "decode")
    return sigmoid(z @ params.w2.T + params.b2)


def kl_divergence(p: float, p_hat: np.ndarray) -> float:
    """Sum over units of the Bernoulli KL divergence KL(p || p_hat_j)."""
    if not 0.0 < p < 1.0:
        raise ValueError("sparsity target must lie in (0, 1)")
    q = np.clip(np.asarray(p_hat, dtype=np.float64), _EPS, 1.0 - _EPS)
    return float(np.sum(p * np.log(p / q) + (1.0 - p) * np.log((1.0 - p) / (1.0 - q))))


def loss(params: SAEParams, batch: np.ndarray, config: SAETrainConfig) -> float:
    """Full objective on one batch; the mean activation is batch-local."""
    x = np.atleast_2d(_check_last_dim(batch, params.input_size, "loss"))
    if x.shape[0] == 0:
        raise ValueError("loss of an empty batch is undefined")
    z = encode(params, x)
    recon = decode(params, z)
    n = x.shape[0]
    j = float(np.sum((recon - x) ** 2)) / (2.0 * n)
    j += config.l2_weight * (float(np.sum(params.w1**2)) + float(np.sum(params.w2**2)))
    if config.sparsity_weight != 0.0:
        j += config.sparsity_weight * kl_divergence(config.sparsity_target, z.mean(axis=0))
    return j


def loss_gradient(params: SAEParams, batch: np.ndarray, config: SAETrainConfig) -> dict:
    """Analytic gradients of loss() w.r.t. w1, b1, w2, b2.

    The sparsity term's dependence on the batch-mean activation is
    propagated through the hidden layer.
    """
    x = np.atleast_2d(_check_last_dim(batch, params.input_size, "loss_gradient"))
    n = x.shape[0]
    if n == 0:
        raise ValueError("gradient of an empty batch is undefined")

    z = sigmoid(x @ params.w1.T + params.b1)
    recon = sigmoid(z @ params.w2.T + params.b2)

    d2 = (recon - x) * recon * (1.0 - recon) / n  # (n, L)
    g_w2 = d2.T @ z + 2.0 * config.l2_weight * params.w2
    g_b2 = d2.sum(axis=0)

    dz = d2 @ params.w2  # (n, K)
    if config.sparsity_weight != 0.0:
        p = config.sparsity_target
        p_hat = z.mean(axis=0)
        inside = (p_hat > _EPS) & (p_hat < 1.0 - _EPS)
        q = np.clip(p_hat, _EPS, 1.0 - _EPS)
        dkl = config.sparsity_weight * (-p / q + (1.0 - p) / (1.0 - q)) * inside
        dz = dz + dkl / n

    d1 = dz * z * (1.0 - z)  # (n, K)
    g_w1 = d1.T @ x + 2.0 * config.l2_weight * params.w1
    g_b1 = d1.sum(axis=0)
    return {"w1": g_w1, "b1": g_b1, "w2": g_w2, "b2": g_b2}


def init_params(input_size: int, config: SAETrainConfig) -> SAEParams:
    """Seeded uniform(-r, r) weights with r = sqrt(6/(K+L)), zero biases."""
    rng = np.random.default_rng(config.rng_seed)
    k, l = config.hidden_size, input_size
    r = np.sqrt(6.0 / (k + l))
    return SAEParams(
        w1=rng.uniform(-r, r, size=(k, l)),
        b1=np.zeros(k),
        w2=rng.uniform(-r, r, size=(l, k)),
        b2=np.zeros(l),
    )


def train(pool: np.ndarray, config: SAETrainConfig) -> SAEParams:
    """Mini-batch gradient descent with momentum over a descriptor pool.

    Deterministic for a fixed config: initialization and per-epoch
    shuffling come from the same seeded generator. The mean batch loss
    is logged once per epoch.
    """
    pool = np.atleast_2d(np.asarray(pool, dtype=np.float64))
    n = pool.shape[0]
    if n == 0:
        raise ValueError("cannot train on an empty descriptor pool")
    if n < config.hidden_size:
        log.warning("descriptor pool (%d) smaller than hidden size (%d)", n, config.hidden_size)
    elif n <= 5000 and len(np.unique(pool, axis=0)) < config.hidden_size:
        log.warning("fewer than hidden_size distinct descriptors in the pool")

    rng = np.random.default_rng(config.rng_seed)
    params = init_params(pool.shape[1], config)
    velocity = {key: np.zeros_like(getattr(params, key)) for key in ("w1", "b1", "w2", "b2")}

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            batch = pool[order[start : start + config.batch_size]]
            grads = loss_gradient(params, batch, config)
            batch_losses.append(loss(params, batch, config))
            for key, grad in grads.items():
                velocity[key] = config.momentum * velocity[key] - config.learning_rate * grad
                setattr(params, key, getattr(params, key) + velocity[key])
        log.info("sae epoch %d/%d mean batch loss %.6f", epoch + 1, config.epochs, np.mean(batch_losses))
    return params


def save_params(params: SAEParams, path) -> None:
    """SAE1 model file: sizes then f64 w1, b1, w2, b2, row-major."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", _SAE_MAGIC, params.input_size, params.hidden_size))
        for key in ("w1", "b1", "w2", "b2"):
            fh.write(np.ascontiguousarray(getattr(params, key), dtype="<f8").tobytes())


def load_params(path) -> SAEParams:
    with open(path, "rb") as fh:
        header = fh.read(12)
        if len(header) != 12 or header[:4] != _SAE_MAGIC:
            raise FormatError(f"{path}: not an SAE1 model file")
        _, l, k = struct.unpack("<4sII", header)
        payload = np.frombuffer(fh.read(), dtype="<f8")
    expected = k * l + k + l * k + l
    if payload.size != expected:
        raise FormatError(f"{path}: SAE1 payload has {payload.size} values, expected {expected}")
    w1, rest = payload[: k * l].reshape(k, l), payload[k * l :]
    b1, rest = rest[:k], rest[k:]
    w2, b2 = rest[: l * k].reshape(l, k), rest[l * k :]
    return SAEParams(w1=w1.copy(), b1=b1.copy(), w2=w2.copy(), b2=b2.copy())
