"""Distortion metrics."""

from __future__ import annotations

import math

import numpy as np

from .. import ops
from ..tensor import DimensionError, Tensor


def mse_loss(s: Tensor, s_hat: Tensor) -> Tensor:
    """Mean squared error over all elements (differentiable)."""
    if s.shape != s_hat.shape:
        raise DimensionError(f"mse_loss: shapes {list(s.shape)} and {list(s_hat.shape)} differ")
    return ops.mse(s_hat, s)


def psnr(s_img, s_hat_img, max_val: float = 255.0) -> float:
    """``10 log10(max_val^2 / MSE)`` with ``s_hat`` clamped to ``[0, max_val]``.

    Identical images give ``math.inf``.
    """
    a = np.asarray(getattr(s_img, "data", s_img), dtype=np.float64)
    b = np.clip(np.asarray(getattr(s_hat_img, "data", s_hat_img), dtype=np.float64), 0.0, max_val)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shapes {list(a.shape)} and {list(b.shape)} differ")
    err = float(np.mean((a - b) ** 2))
    return psnr_from_mse(err, max_val)


def psnr_from_mse(err: float, max_val: float = 255.0) -> float:
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / err)


def image_psnr(s: Tensor, s_hat: Tensor, rounding: bool = False) -> float:
    """PSNR of ``[0, 1]`` images on the 8-bit scale (continuous unless ``rounding``)."""
    ref = np.clip(s.data, 0.0, 1.0) * 255.0
    rec = np.clip(s_hat.data, 0.0, 1.0) * 255.0
    if rounding:
        ref, rec = np.round(ref), np.round(rec)
    return psnr(ref, rec, 255.0)
