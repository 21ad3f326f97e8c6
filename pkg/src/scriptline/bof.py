"""Bag-of-features frame sequences from quantized descriptors.

A learned codebook (autoencoder hidden layer, or k-means centroids as
the hard-clustering baseline) assigns every descriptor a K-vector of
weights. A vertical window of `width` pixel columns slides right to
left in steps of `shift`; each window sums the assignment vectors of
the descriptors whose center x falls inside it, giving one histogram
frame per position. The frame stream is what the sequence models
consume.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .dsift import DescriptorGrid
from .errors import FormatError
from .sae import SAEParams, encode

_BOF_MAGIC = b"BOF1"


@dataclass
class FrameSequence:
    frames: np.ndarray  # (n_frames, K) float64
    frame_width: int
    shift: int
    source_image_width: int
    right_to_left: bool = True

    def __len__(self) -> int:
        return self.frames.shape[0]


class SaeCodebook:
    """Codebook whose words are the autoencoder's hidden units."""

    def __init__(self, params: SAEParams):
        self.params = params

    @property
    def size(self) -> int:
        return self.params.hidden_size

    def weights(self, descriptors: np.ndarray) -> np.ndarray:
        return np.atleast_2d(encode(self.params, descriptors))

    def assign_hard(self, descriptors: np.ndarray) -> np.ndarray:
        return np.argmax(self.weights(descriptors), axis=1)


class KMeansCodebook:
    """Hard codebook of centroids; assignment is nearest by Euclidean distance."""

    def __init__(self, centroids: np.ndarray):
        self.centroids = np.asarray(centroids, dtype=np.float64)

    @property
    def size(self) -> int:
        return self.centroids.shape[0]

    def assign_hard(self, descriptors: np.ndarray) -> np.ndarray:
        descriptors = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
        if descriptors.shape[1] != self.centroids.shape[1]:
            raise ValueError("descriptor dimension does not match the codebook")
        d2 = (
            np.sum(descriptors**2, axis=1)[:, None]
            - 2.0 * descriptors @ self.centroids.T
            + np.sum(self.centroids**2, axis=1)[None, :]
        )
        return np.argmin(d2, axis=1)  # argmin takes the lowest index on ties

    def weights(self, descriptors: np.ndarray) -> np.ndarray:
        idx = self.assign_hard(descriptors)
        out = np.zeros((idx.shape[0], self.size))
        out[np.arange(idx.shape[0]), idx] = 1.0
        return out


def quantize_soft(params: SAEParams, descriptor: np.ndarray) -> np.ndarray:
    """Soft assignment of one descriptor: the hidden activation vector."""
    return encode(params, descriptor)


def quantize_hard(codebook, descriptor: np.ndarray) -> int:
    """Hard assignment: index of the strongest word, lowest index on ties."""
    return int(codebook.assign_hard(np.atleast_2d(descriptor))[0])


def kmeans_fit(descriptors: np.ndarray, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6) -> KMeansCodebook:
    """Lloyd's algorithm with kmeans++ seeding; deterministic per seed.

    Stops when no centroid moves more than `tol` or after `max_iter`
    sweeps. A cluster that loses all its points keeps its centroid.
    """
    x = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
    n = x.shape[0]
    if n < k:
        raise ValueError(f"need at least {k} descriptors to fit {k} centroids, got {n}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:  # all remaining points coincide with a centroid
            centroids[j] = x[rng.integers(n)]
        else:
            centroids[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((x - centroids[j]) ** 2, axis=1))

    book = KMeansCodebook(centroids)
    for _ in range(max_iter):
        labels = book.assign_hard(x)
        moved = 0.0
        new = centroids.copy()
        for j in range(k):
            members = x[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
                moved = max(moved, float(np.max(np.abs(new[j] - centroids[j]))))
        centroids = new
        book = KMeansCodebook(centroids)
        if moved < tol:
            break
    return book


def kmeans_inertia(codebook: KMeansCodebook, descriptors: np.ndarray) -> float:
    x = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
    labels = codebook.assign_hard(x)
    return float(np.sum((x - codebook.centroids[labels]) ** 2))


def window_origins(image_width: int, width: int, shift: int) -> np.ndarray:
    """Left edges of the sliding windows, rightmost window first."""
    if image_width >= width:
        count = (image_width - width) // shift + 1
        return image_width - width - shift * np.arange(count)
    return np.array([0])  # single degenerate window over the whole image


def frame_sequence(grid: DescriptorGrid, codebook, width: int = 4, shift: int = 3, mode: str = "soft") -> FrameSequence:
    """Right-to-left histogram sequence over vertical pixel bands.

    A descriptor belongs to window t iff its center x lies in
    [x_t, x_t + width). Histograms are raw sums of assignment vectors
    (hard mode: one-hot counts); empty windows give zero frames.
    """
    if width < 1 or shift < 1:
        raise ValueError("window width and shift must be >= 1")
    if mode not in ("soft", "hard"):
        raise ValueError(f"unknown quantization mode {mode!r}")

    origins = window_origins(grid.image_width, width, shift)
    k = codebook.size
    if len(grid) == 0:
        frames = np.zeros((len(origins), k))
    else:
        if mode == "soft":
            weights = codebook.weights(grid.descriptors)
        else:
            idx = codebook.assign_hard(grid.descriptors)
            weights = np.zeros((len(idx), k))
            weights[np.arange(len(idx)), idx] = 1.0
        xs = grid.centers[:, 0]  # ascending by grid ordering
        cum = np.vstack([np.zeros(k), np.cumsum(weights, axis=0)])
        lo = np.searchsorted(xs, origins, side="left")
        hi = np.searchsorted(xs, origins + width, side="left")
        frames = cum[hi] - cum[lo]
    return FrameSequence(
        frames=frames,
        frame_width=int(width),
        shift=int(shift),
        source_image_width=int(grid.image_width),
    )


def l1_normalize(seq: FrameSequence) -> FrameSequence:
    """Scale each frame to unit L1 mass; all-zero frames stay zero."""
    sums = seq.frames.sum(axis=1, keepdims=True)
    safe = np.where(sums > 0, sums, 1.0)
    return FrameSequence(
        frames=seq.frames / safe,
        frame_width=seq.frame_width,
        shift=seq.shift,
        source_image_width=seq.source_image_width,
        right_to_left=seq.right_to_left,
    )


def save_frames(frames, path) -> None:
    """BOF1 feature file: frame count, dimension, f32 frames row-major."""
    arr = frames.frames if isinstance(frames, FrameSequence) else np.asarray(frames)
    arr = np.atleast_2d(arr)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", _BOF_MAGIC, arr.shape[0], arr.shape[1]))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_frames(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(12)
        if len(header) != 12 or header[:4] != _BOF_MAGIC:
            raise FormatError(f"{path}: not a BOF1 feature file")
        _, n, dim = struct.unpack("<4sII", header)
        payload = np.frombuffer(fh.read(), dtype="<f4")
    if payload.size != n * dim:
        raise FormatError(f"{path}: BOF1 payload has {payload.size} values, expected {n * dim}")
    return payload.reshape(n, dim).astype(np.float64)
