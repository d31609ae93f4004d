"""Visual selective-scan (V-S6) module and the two-branch VSSM-CA block.

A ``[h, w]`` patch is flattened four ways (column scan, row scan and their
reversals). Each flattening drives its own state space model whose step
size, input and output matrices are computed from the whole flattened
vector; the four output sequences are folded back to ``[h, w]`` and summed.

Internally everything is batched over ``4 * channels`` sequences, ordered
(channel, direction). The single-patch functions below wrap that core.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from . import ops
from .nn import INIT_STD, ChannelLayerNorm, Conv2d, Linear, Module, param
from .tensor import DTYPE, DimensionError, Function, Tensor

DIRECTIONS = 4
EXP_MODES = ("matrix", "elementwise")


class SingularDiscretizationError(ArithmeticError):
    pass


# ---------------------------------------------------------------- parameters

class VS6Params(Module):
    """Seven learnable matrices per direction, stacked over (channel, direction).

    Shapes (``B = 4 * channels``): ``G [B,1,N]``, ``delta [B,N,N]``,
    ``H1/H2/H3 [B,N,D]``, ``A [B,N,N]``, ``Dmat [B,1,1]``.
    """

    def __init__(self, G, delta, H1, H2, H3, A, Dmat):
        self.G, self.delta, self.H1, self.H2, self.H3, self.A, self.Dmat = (
            _as_param(t) for t in (G, delta, H1, H2, H3, A, Dmat))
        b, n, d = self.H1.shape
        if b % DIRECTIONS:
            raise DimensionError(f"VS6Params: leading dim {b} is not a multiple of {DIRECTIONS}")
        expected = {"G": (b, 1, n), "delta": (b, n, n), "H2": (b, n, d), "H3": (b, n, d),
                    "A": (b, n, n), "Dmat": (b, 1, 1)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"VS6Params.{name}: expected {list(shape)}, "
                                     f"got {list(getattr(self, name).shape)}")
        self.n_state = n
        self.seq_len = d
        self.channels = b // DIRECTIONS

    def direction(self, index: int) -> dict[str, Tensor]:
        """Parameters of one (channel, direction) slot as unbatched tensors."""
        return {name: ops.getitem(getattr(self, name), index)
                for name in ("G", "delta", "H1", "H2", "H3", "A", "Dmat")}


def _as_param(t) -> Tensor:
    return t if isinstance(t, Tensor) else param(np.asarray(t, dtype=DTYPE))


def init_vs6_params(channels: int, n_state: int, seq_len: int,
                    rng: np.random.Generator, std: float = INIT_STD,
                    delta_init: float = 0.1) -> VS6Params:
    b, n, d = DIRECTIONS * channels, n_state, seq_len
    eye = np.broadcast_to(np.eye(n), (b, n, n))
    return VS6Params(
        G=rng.normal(0.0, std, size=(b, 1, n)),
        delta=delta_init * eye,
        H1=rng.normal(0.0, std, size=(b, n, d)),
        H2=rng.normal(0.0, std, size=(b, n, d)),
        H3=rng.normal(0.0, std, size=(b, n, d)),
        A=-eye,
        Dmat=np.ones((b, 1, 1)),
    )


# ---------------------------------------------------------------- flattening / merging

def flatten_four_directions(z: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """``z [h,w]`` -> ``vec(z), vec(z^T), R(vec(z)), R(vec(z^T))`` with column-major vec."""
    if z.ndim != 2:
        raise DimensionError(f"expected a [h, w] patch, got {list(z.shape)}")
    h, w = z.shape
    v1 = ops.reshape(ops.transpose2d(z), (h * w,))
    v2 = ops.reshape(z, (h * w,))
    return v1, v2, ops.reverse(v1), ops.reverse(v2)


def flatten_batched(z: Tensor) -> Tensor:
    """``[c, h, w] -> [4c, D]`` in (channel, direction) order."""
    c, h, w = z.shape
    d = h * w
    v1 = ops.reshape(ops.permute(z, (0, 2, 1)), (c, d))
    v2 = ops.reshape(z, (c, d))
    v = ops.stack([v1, v2, ops.flip(v1, 1), ops.flip(v2, 1)], axis=1)
    return ops.reshape(v, (DIRECTIONS * c, d))


def column_major_matrix(y: Tensor, rows: int, cols: int) -> Tensor:
    """Inverse of column-major vec: ``[rows*cols] -> [rows, cols]``."""
    return ops.transpose2d(ops.reshape(y, (cols, rows)))


def merge_directions(Y1: Tensor, Y2: Tensor, Y3: Tensor, Y4: Tensor) -> Tensor:
    """``Y1 + Y2^T + R(Y3 + Y4^T)``; ``Y2`` and ``Y4`` are ``[w, h]``."""
    h, w = Y1.shape
    if Y3.shape != (h, w) or Y2.shape != (w, h) or Y4.shape != (w, h):
        raise DimensionError(f"merge_directions: shapes {[list(Y.shape) for Y in (Y1, Y2, Y3, Y4)]}")
    tail = ops.reverse(ops.add(Y3, ops.transpose2d(Y4)))
    return ops.add(ops.add(Y1, ops.transpose2d(Y2)), tail)


def merge_batched(y: Tensor, channels: int, h: int, w: int) -> Tensor:
    """``[4c, D] -> [c, h, w]``, the batched form of :func:`merge_directions`."""
    y = ops.reshape(y, (channels, DIRECTIONS, h * w))
    y1, y2, y3, y4 = (ops.getitem(y, (slice(None), j)) for j in range(DIRECTIONS))
    # column-major fold of a [c, D] block to [c, h, w]
    Y1 = ops.permute(ops.reshape(y1, (channels, w, h)), (0, 2, 1))
    Y3 = ops.permute(ops.reshape(y3, (channels, w, h)), (0, 2, 1))
    # Y2, Y4 fold to [w, h]; their transposes are plain row-major reshapes
    Y2t = ops.reshape(y2, (channels, h, w))
    Y4t = ops.reshape(y4, (channels, h, w))
    tail = ops.flip(ops.add(Y3, Y4t), (1, 2))
    return ops.add(ops.add(Y1, Y2t), tail)


# ---------------------------------------------------------------- projections / discretization

def _batch(*ts: Tensor, ndims: tuple[int, ...]) -> tuple[bool, list[Tensor]]:
    if all(t.ndim == n for t, n in zip(ts, ndims)):
        return False, [ops.reshape(t, (1, *t.shape)) for t in ts]
    return True, list(ts)


def _unbatch(batched: bool, *ts: Tensor):
    if batched:
        return ts
    return tuple(ops.reshape(t, t.shape[1:]) for t in ts)


def project_parameters(v: Tensor, G: Tensor, delta: Tensor, H1: Tensor, H2: Tensor,
                       H3: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """``Delta = (H1 v) G + delta``, ``B = H2 v``, ``C = (H3 v)^T``.

    Unbatched shapes: ``v [D]``, ``G [1,N]``, ``delta [N,N]``, ``H* [N,D]``.
    A leading batch axis on every argument is also accepted.
    """
    batched, (v, G, delta, H1, H2, H3) = _batch(v, G, delta, H1, H2, H3,
                                                ndims=(1, 2, 2, 2, 2, 2))
    b, n, d = H1.shape
    if v.shape != (b, d) or G.shape != (b, 1, n) or delta.shape != (b, n, n):
        raise DimensionError(f"project_parameters: v {list(v.shape)}, G {list(G.shape)}, "
                             f"delta {list(delta.shape)}, H1 {list(H1.shape)}")
    if H2.shape != H1.shape or H3.shape != H1.shape:
        raise DimensionError("project_parameters: H1, H2, H3 must share a shape")
    vc = ops.reshape(v, (b, d, 1))
    Delta = ops.add(ops.bmm(ops.bmm(H1, vc), G), delta)
    B = ops.bmm(H2, vc)
    C = ops.permute(ops.bmm(H3, vc), (0, 2, 1))
    return _unbatch(batched, Delta, B, C)


class MatrixExp(Function):
    """Batched matrix exponential with its Frechet-derivative adjoint."""

    def forward(self, x):
        self.out = scipy.linalg.expm(x)
        return self.out

    def backward(self, g):
        (x,) = self.inputs
        n = x.shape[-1]
        xt = x.data.transpose(0, 2, 1)
        block = np.zeros((x.shape[0], 2 * n, 2 * n), dtype=DTYPE)
        block[:, :n, :n] = xt
        block[:, n:, n:] = xt
        block[:, :n, n:] = g
        return (scipy.linalg.expm(block)[:, :n, n:],)


def matrix_exp(x: Tensor) -> Tensor:
    return MatrixExp.apply(x)


def discretize_taylor(Delta: Tensor, A: Tensor, B: Tensor,
                      exp_mode: str = "elementwise") -> tuple[Tensor, Tensor]:
    """``Abar = exp(Delta A)``, ``Bbar = Delta B`` (first-order hold on B).

    ``exp_mode="elementwise"`` exponentiates each entry of ``Delta A`` (inputs
    clamped at 20); ``"matrix"`` takes the matrix exponential.
    """
    if exp_mode not in EXP_MODES:
        raise ValueError(f"exp_mode must be one of {EXP_MODES}, got {exp_mode!r}")
    batched, (Delta, A, B) = _batch(Delta, A, B, ndims=(2, 2, 2))
    if Delta.shape != A.shape or Delta.shape[2] != B.shape[1]:
        raise DimensionError(f"discretize: Delta {list(Delta.shape)}, A {list(A.shape)}, "
                             f"B {list(B.shape)}")
    DA = ops.bmm(Delta, A)
    Abar = ops.exp(DA, clamp=ops.EXP_CLAMP) if exp_mode == "elementwise" else matrix_exp(DA)
    Bbar = ops.bmm(Delta, B)
    return _unbatch(batched, Abar, Bbar)


def discretize_zoh_exact(Delta, A, B) -> tuple[np.ndarray, np.ndarray]:
    """Exact zero-order hold: ``expm(Delta A)``, ``(Delta A)^-1 (expm(Delta A) - I) Delta B``.

    Works on plain arrays (no gradient); used as the reference for the
    first-order variant.
    """
    Delta, A, B = (np.atleast_2d(np.asarray(getattr(t, "data", t), dtype=DTYPE))
                   for t in (Delta, A, B))
    DA = Delta @ A
    Abar = scipy.linalg.expm(DA)
    if np.linalg.matrix_rank(DA) < DA.shape[0]:
        raise SingularDiscretizationError("Delta @ A is singular; exact ZOH input matrix undefined")
    Bbar = np.linalg.solve(DA, (Abar - np.eye(DA.shape[0])) @ (Delta @ B))
    return Abar, Bbar


# ---------------------------------------------------------------- scan

class SelectiveScan(Function):
    """``h_t = Abar h_{t-1} + Bbar v_t``, ``y_t = C h_t + Dmat v_t`` from ``h_0 = 0``."""

    def forward(self, v, Abar, Bbar, C, Dmat):
        bsz, d = v.shape
        n = Abar.shape[1]
        bb = Bbar[:, :, 0]
        cc = C[:, 0, :]
        hs = np.zeros((d + 1, bsz, n), dtype=DTYPE)
        h = hs[0]
        for t in range(d):
            h = np.einsum("bij,bj->bi", Abar, h) + bb * v[:, t:t + 1]
            hs[t + 1] = h
        self.hs = hs
        y = np.einsum("tbn,bn->bt", hs[1:], cc) + Dmat[:, 0, :] * v
        return y

    def backward(self, g):
        v, Abar, Bbar, C, Dmat = (t.data for t in self.inputs)
        hs = self.hs
        bsz, d = v.shape
        bb = Bbar[:, :, 0]
        cc = C[:, 0, :]
        gC = np.einsum("bt,tbn->bn", g, hs[1:])[:, None, :]
        gD = (g * v).sum(axis=1)[:, None, None]
        gv = g * Dmat[:, 0, :]
        gA = np.zeros_like(Abar)
        gB = np.zeros_like(bb)
        gh = np.zeros_like(bb)
        At = Abar.transpose(0, 2, 1)
        for t in range(d - 1, -1, -1):
            gh = gh + cc * g[:, t:t + 1]
            gA += gh[:, :, None] * hs[t][:, None, :]
            gB += gh * v[:, t:t + 1]
            gv[:, t] += (gh * bb).sum(axis=1)
            gh = np.einsum("bij,bj->bi", At, gh)
        return gv, gA, gB[:, :, None], gC, gD


def selective_scan(v: Tensor, Abar: Tensor, Bbar: Tensor, C: Tensor, Dmat: Tensor) -> Tensor:
    """Run the recurrence over every element of ``v``.

    Unbatched shapes: ``v [D]``, ``Abar [N,N]``, ``Bbar [N,1]``, ``C [1,N]``,
    ``Dmat [1,1]``; a leading batch axis is also accepted.
    """
    batched, (v, Abar, Bbar, C, Dmat) = _batch(v, Abar, Bbar, C, Dmat, ndims=(1, 2, 2, 2, 2))
    b, n = Abar.shape[0], Abar.shape[1]
    expected = {"Abar": (b, n, n), "Bbar": (b, n, 1), "C": (b, 1, n), "Dmat": (b, 1, 1)}
    for name, t in zip(expected, (Abar, Bbar, C, Dmat)):
        if t.shape != expected[name]:
            raise DimensionError(f"selective_scan: {name} {list(t.shape)} != {list(expected[name])}")
    if v.ndim != 2 or v.shape[0] != b:
        raise DimensionError(f"selective_scan: v {list(v.shape)} for batch {b}")
    (y,) = _unbatch(batched, SelectiveScan.apply(v, Abar, Bbar, C, Dmat))
    return y


# ---------------------------------------------------------------- V-S6

def vs6_sequences(v: Tensor, p: VS6Params, exp_mode: str = "matrix") -> Tensor:
    """Scan ``[4c, D]`` flattened sequences with their own parameters."""
    Delta, B, C = project_parameters(v, p.G, p.delta, p.H1, p.H2, p.H3)
    Abar, Bbar = discretize_taylor(Delta, p.A, B, exp_mode=exp_mode)
    return selective_scan(v, Abar, Bbar, C, p.Dmat)


def vs6_bank_forward(z: Tensor, p: VS6Params, exp_mode: str = "matrix") -> Tensor:
    """Independent V-S6 modules over the channels of ``z [c, h, w]``."""
    c, h, w = z.shape
    if c != p.channels or h * w != p.seq_len:
        raise DimensionError(f"V-S6 bank for {p.channels} channels of length {p.seq_len} "
                             f"got input {list(z.shape)}")
    y = vs6_sequences(flatten_batched(z), p, exp_mode)
    return merge_batched(y, c, h, w)


def vs6_forward(z: Tensor, p: VS6Params, exp_mode: str = "matrix") -> Tensor:
    """One V-S6 module on a single ``[h, w]`` patch."""
    if z.ndim != 2:
        raise DimensionError(f"vs6_forward expects [h, w], got {list(z.shape)}")
    h, w = z.shape
    return ops.reshape(vs6_bank_forward(ops.reshape(z, (1, h, w)), p, exp_mode), (h, w))


# ---------------------------------------------------------------- VSSM-CA block

class VSSMBlock(Module):
    """Layer norm, then a V-S6 branch gated by a SiLU branch, projected back, plus residual.

    Branch 1: FC ``c -> E*c``, depthwise 3x3 conv, SiLU, additive CSI, V-S6.
    Branch 2: FC ``c -> E*c``, SiLU.
    """

    def __init__(self, channels: int, height: int, width: int, rng: np.random.Generator,
                 n_state: int = 16, expansion: int = 2, conv_kernel: int = 3,
                 exp_mode: str = "matrix"):
        if exp_mode not in EXP_MODES:
            raise ValueError(f"exp_mode must be one of {EXP_MODES}")
        inner = expansion * channels
        self.channels = channels
        self.inner_channels = inner
        self.height = height
        self.width = width
        self.exp_mode = exp_mode
        self.norm = ChannelLayerNorm(channels)
        self.in_proj = Linear(channels, inner, rng)
        self.dw_conv = Conv2d(inner, inner, conv_kernel, rng, padding=conv_kernel // 2,
                              groups=inner)
        self.vs6 = init_vs6_params(inner, n_state, height * width, rng)
        self.gate_proj = Linear(channels, inner, rng)
        self.out_proj = Linear(inner, channels, rng)

    def __call__(self, x: Tensor, csi_add: Tensor | None = None) -> Tensor:
        return vssm_block_forward(x, self, csi_add)


def vssm_block_forward(x: Tensor, bp: VSSMBlock, csi_add: Tensor | None = None) -> Tensor:
    c, h, w = x.shape
    if c != bp.channels or (h, w) != (bp.height, bp.width):
        raise DimensionError(f"VSSM block for [{bp.channels},{bp.height},{bp.width}] "
                             f"got {list(x.shape)}")
    n = bp.norm(x)
    z = ops.silu(bp.dw_conv(bp.in_proj(n)))
    if csi_add is not None:
        if csi_add.shape != (bp.inner_channels,):
            raise DimensionError(f"csi_add {list(csi_add.shape)} != [{bp.inner_channels}]")
        z = ops.add(z, ops.broadcast_to(ops.reshape(csi_add, (bp.inner_channels, 1, 1)), z.shape))
    y = vs6_bank_forward(z, bp.vs6, bp.exp_mode)
    gate = ops.silu(bp.gate_proj(n))
    return ops.add(x, bp.out_proj(ops.mul(y, gate)))


def scan_core_macs(seq_len: int, n_state: int) -> int:
    """MACs of the recurrence for one direction: ``D * (N^2 + 2N)``."""
    return seq_len * (n_state * n_state + 2 * n_state)


__all__ = [
    "VS6Params", "init_vs6_params", "flatten_four_directions", "merge_directions",
    "project_parameters", "discretize_taylor", "discretize_zoh_exact", "selective_scan",
    "vs6_forward", "vs6_bank_forward", "VSSMBlock", "vssm_block_forward", "matrix_exp",
    "scan_core_macs", "column_major_matrix", "flatten_batched", "merge_batched",
]
