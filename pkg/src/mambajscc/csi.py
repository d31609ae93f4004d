"""Channel-state conditioning: a shared SNR encoder and per-block additive embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import Linear, Module
from .tensor import DimensionError, Tensor


@dataclass
class CsiVector:
    values: Tensor
    source_snr_db: float

    @property
    def length(self) -> int:
        return self.values.shape[0]


def sinusoidal_encode(snr_db: float, d_pe: int) -> Tensor:
    """Transformer-style encoding of a scalar SNR (dB) used as the position."""
    if d_pe < 2 or d_pe % 2:
        raise ValueError(f"sinusoidal encoding dimension must be even and positive, got {d_pe}")
    i = np.arange(d_pe // 2)
    angle = float(snr_db) / np.power(10000.0, 2 * i / d_pe)
    pe = np.empty(d_pe)
    pe[0::2] = np.sin(angle)
    pe[1::2] = np.cos(angle)
    return Tensor._wrap(pe)


class CsiEncoder(Module):
    """sinusoidal code -> FC -> swish -> FC, producing the length-m CSI vector."""

    def __init__(self, m: int, rng: np.random.Generator, d_pe: int | None = None):
        self.m = m
        self.d_pe = m if d_pe is None else d_pe
        self.fc1 = Linear(self.d_pe, m, rng)
        self.fc2 = Linear(m, m, rng)

    def __call__(self, snr_db: float) -> CsiVector:
        return encode_csi(snr_db, self)


def encode_csi(snr_db: float, p: CsiEncoder) -> CsiVector:
    if not math.isfinite(snr_db):
        raise ValueError(f"CSI needs a finite SNR, got {snr_db}")
    pe = sinusoidal_encode(snr_db, p.d_pe)
    u = p.fc2(ops.swish(p.fc1(pe)))
    return CsiVector(values=u, source_snr_db=float(snr_db))


class CsiEmbedding(Module):
    """Per-block FC expanding the CSI vector to one scalar per patch (channel)."""

    def __init__(self, m: int, channels: int, rng: np.random.Generator):
        self.m = m
        self.channels = channels
        self.fc = Linear(m, channels, rng)

    def offsets(self, u: CsiVector) -> Tensor:
        if u.length != self.m:
            raise DimensionError(f"CSI vector of length {u.length} for an embedding expecting {self.m}")
        return self.fc(u.values)


def embed_csi(u: CsiVector, p: CsiEmbedding, patches: Tensor) -> Tensor:
    """Add ``FC(u)[c]`` to every element of patch ``c``."""
    if patches.ndim != 3 or patches.shape[0] != p.channels:
        raise DimensionError(f"embed_csi: {p.channels}-channel embedding, patches {list(patches.shape)}")
    off = ops.reshape(p.offsets(u), (p.channels, 1, 1))
    return ops.add(patches, ops.broadcast_to(off, patches.shape))


def csi_overhead_params(m: int, d_pe: int, block_channels: list[int], halves: int = 2) -> int:
    """Closed-form parameter count of the CSI path (weights plus biases).

    Each codec half owns one encoder (``m*d_pe + m*m`` weights, ``2m``
    biases); each block owns an embedding (``m*c_z`` weights, ``c_z`` biases).
    ``block_channels`` lists ``c_z`` for every block of the whole model.
    """
    per_encoder = m * d_pe + m * m + 2 * m
    return halves * per_encoder + sum(m * c + c for c in block_channels)
