"""Power normalization, AWGN / block-Rayleigh channels and MMSE equalization.

Complex symbols travel as real tensors ``[2c, h, w]``: channel ``2i`` is the
real part and ``2i+1`` the imaginary part of complex channel ``i``. SNR is per
complex symbol at unit signal power, so the noise variance is
``10 ** (-snr_db / 10)`` split evenly between real and imaginary parts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import DimensionError, Tensor

KINDS = ("awgn", "rayleigh")


@dataclass
class ChannelSignal:
    symbols: Tensor
    power_scale: float = 1.0
    degenerate: bool = False

    @property
    def num_symbols(self) -> int:
        return self.symbols.size // 2

    def complex_symbols(self) -> np.ndarray:
        return to_complex(self.symbols.data)


@dataclass(frozen=True)
class ChannelRealization:
    kind: str
    snr_db: float
    h: complex = 1.0 + 0.0j
    noise_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"channel kind must be one of {KINDS}, got {self.kind!r}")

    @property
    def noise_variance(self) -> float:
        return 0.0 if math.isinf(self.snr_db) and self.snr_db > 0 else 10.0 ** (-self.snr_db / 10.0)


def sample_realization(kind: str, snr_db: float, rng: np.random.Generator) -> ChannelRealization:
    """Draw the fading coefficient (Rayleigh only) and a noise seed."""
    h = 1.0 + 0.0j
    if kind == "rayleigh":
        re, im = rng.standard_normal(2)
        h = complex(re, im) / math.sqrt(2.0)
    seed = int(rng.integers(0, 2**63 - 1))
    return ChannelRealization(kind=kind, snr_db=float(snr_db), h=h, noise_seed=seed)


def to_complex(x: np.ndarray) -> np.ndarray:
    if x.shape[0] % 2:
        raise DimensionError(f"need an even channel count to pair symbols, got {x.shape[0]}")
    return x[0::2] + 1j * x[1::2]


def from_complex(z: np.ndarray) -> np.ndarray:
    out = np.empty((2 * z.shape[0], *z.shape[1:]))
    out[0::2] = z.real
    out[1::2] = z.imag
    return out


def power_normalize(x: Tensor) -> ChannelSignal:
    """Scale ``x`` so the mean complex-symbol power is one (differentiable)."""
    if x.shape[0] % 2:
        raise DimensionError(f"need an even channel count to pair symbols, got {x.shape[0]}")
    power = 2.0 * float(np.mean(x.data * x.data))
    if power == 0.0:
        return ChannelSignal(symbols=x, power_scale=1.0, degenerate=True)
    p = ops.mul(ops.mean(ops.mul(x, x)), 2.0)
    scale = ops.power(p, -0.5)
    return ChannelSignal(symbols=ops.mul(x, scale), power_scale=power ** -0.5)


def complex_scale(x: Tensor, g: complex) -> Tensor:
    """Multiply every interleaved complex symbol of ``x`` by the constant ``g``."""
    c2, *rest = x.shape
    c = c2 // 2
    n = int(np.prod(rest)) if rest else 1
    rot = Tensor._wrap(np.array([[g.real, -g.imag], [g.imag, g.real]]))
    y = ops.reshape(ops.permute(ops.reshape(x, (c, 2, n)), (1, 0, 2)), (2, c * n))
    y = ops.matmul(rot, y)
    y = ops.permute(ops.reshape(y, (2, c, n)), (1, 0, 2))
    return ops.reshape(y, x.shape)


def channel_noise(shape: tuple[int, ...], realization: ChannelRealization) -> np.ndarray:
    var = realization.noise_variance
    if var == 0.0:
        return np.zeros(shape)
    rng = np.random.default_rng(realization.noise_seed)
    return rng.standard_normal(shape) * math.sqrt(var / 2.0)


def transmit(sig: ChannelSignal, realization: ChannelRealization) -> ChannelSignal:
    """``y = x + n`` (AWGN) or ``y = h x + n`` (block Rayleigh); noise and h are constants."""
    x = sig.symbols
    if realization.kind == "rayleigh":
        x = complex_scale(x, realization.h)
    noise = channel_noise(x.shape, realization)
    if realization.noise_variance > 0.0:
        x = ops.add(x, Tensor._wrap(noise))
    return ChannelSignal(symbols=x, power_scale=sig.power_scale, degenerate=sig.degenerate)


def mmse_equalize(y: ChannelSignal, realization: ChannelRealization) -> ChannelSignal:
    """``conj(h) y / (|h|^2 + sigma^2)`` for Rayleigh; AWGN passes through."""
    if realization.kind == "awgn":
        return y
    h = realization.h
    denom = abs(h) ** 2 + realization.noise_variance
    if denom == 0.0:
        raise ZeroDivisionError("MMSE equalizer undefined for h = 0 without noise")
    g = h.conjugate() / denom
    return ChannelSignal(symbols=complex_scale(y.symbols, g), power_scale=y.power_scale,
                         degenerate=y.degenerate)


def zero_forcing_equalize(y: ChannelSignal, realization: ChannelRealization) -> ChannelSignal:
    if realization.kind == "awgn":
        return y
    return ChannelSignal(symbols=complex_scale(y.symbols, 1.0 / realization.h),
                         power_scale=y.power_scale, degenerate=y.degenerate)
