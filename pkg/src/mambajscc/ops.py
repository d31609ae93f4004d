"""Differentiable primitives over :class:`~mambajscc.tensor.Tensor`."""

from __future__ import annotations

from numbers import Real
from typing import Sequence

import numpy as np

from .tensor import DTYPE, DimensionError, Function, Tensor

EXP_CLAMP = 20.0


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Real):
        return Tensor._wrap(np.array(float(x), dtype=DTYPE))
    raise TypeError(f"expected Tensor or real scalar, got {type(x).__name__}")


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise DimensionError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} differ "
                         "(only scalar broadcasting is supported)")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # undo scalar broadcasting
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum(), dtype=DTYPE).reshape(shape)


# ---------------------------------------------------------------- elementwise

class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, g):
        a, b = self.inputs
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, g):
        a, b = self.inputs
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, g):
        a, b = self.inputs
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)


class Div(Function):
    def forward(self, a, b):
        return a / b

    def backward(self, g):
        a, b = self.inputs
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _reduce_to(ga, a.shape), _reduce_to(gb, b.shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    return Mul.apply(a, b)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "div")
    return Div.apply(a, b)


class Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, g):
        return (-g,)


def neg(x: Tensor) -> Tensor:
    return Neg.apply(x)


class Power(Function):
    def forward(self, x, p):
        self.p = p
        return x ** p

    def backward(self, g):
        (x,) = self.inputs
        return (g * self.p * x.data ** (self.p - 1),)


def power(x: Tensor, p: float) -> Tensor:
    return Power.apply(x, p=float(p))


class Reciprocal(Function):
    def forward(self, x):
        self.out = 1.0 / x
        return self.out

    def backward(self, g):
        return (-g * self.out * self.out,)


def reciprocal(x: Tensor) -> Tensor:
    return Reciprocal.apply(x)


class Exp(Function):
    def forward(self, x, clamp):
        if clamp is None:
            self.mask = None
            self.out = np.exp(x)
        else:
            self.mask = x <= clamp
            self.out = np.exp(np.minimum(x, clamp))
        return self.out

    def backward(self, g):
        gx = g * self.out
        if self.mask is not None:
            gx = gx * self.mask
        return (gx,)


def exp(x: Tensor, clamp: float | None = None) -> Tensor:
    """Elementwise exponential; inputs above ``clamp`` are clipped first."""
    return Exp.apply(x, clamp=clamp)


class Sigmoid(Function):
    def forward(self, x):
        self.out = _sigmoid(x)
        return self.out

    def backward(self, g):
        return (g * self.out * (1.0 - self.out),)


class SiLU(Function):
    def forward(self, x):
        self.sig = _sigmoid(x)
        return x * self.sig

    def backward(self, g):
        (x,) = self.inputs
        s = self.sig
        return (g * (s + x.data * s * (1.0 - s)),)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def silu(x: Tensor) -> Tensor:
    return SiLU.apply(x)


# unit-beta swish is silu
swish = silu


# ---------------------------------------------------------------- reductions

class Sum(Function):
    def forward(self, x):
        return np.asarray(x.sum(), dtype=DTYPE)

    def backward(self, g):
        (x,) = self.inputs
        return (np.full(x.shape, float(g), dtype=DTYPE),)


class Mean(Function):
    def forward(self, x):
        return np.asarray(x.mean(), dtype=DTYPE)

    def backward(self, g):
        (x,) = self.inputs
        return (np.full(x.shape, float(g) / x.size, dtype=DTYPE),)


def sum(x: Tensor) -> Tensor:  # noqa: A001
    return Sum.apply(x)


def mean(x: Tensor) -> Tensor:
    return Mean.apply(x)


# ---------------------------------------------------------------- linear algebra

class MatMul(Function):
    def forward(self, a, b):
        return a @ b

    def backward(self, g):
        a, b = self.inputs
        return g @ b.data.T, a.data.T @ g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {list(a.shape)} by {list(b.shape)}")
    return MatMul.apply(a, b)


class BatchMatMul(Function):
    def forward(self, a, b):
        return np.matmul(a, b)

    def backward(self, g):
        a, b = self.inputs
        return np.matmul(g, b.data.transpose(0, 2, 1)), np.matmul(a.data.transpose(0, 2, 1), g)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul: ``[B,m,k] x [B,k,n] -> [B,m,n]``."""
    if (a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0]
            or a.shape[2] != b.shape[1]):
        raise DimensionError(f"bmm: cannot multiply {list(a.shape)} by {list(b.shape)}")
    return BatchMatMul.apply(a, b)


# ---------------------------------------------------------------- layout

class Reshape(Function):
    def forward(self, x, shape):
        return x.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.inputs[0].shape),)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size or any(s <= 0 for s in shape):
        raise DimensionError(f"reshape: cannot view {list(x.shape)} as {list(shape)}")
    return Reshape.apply(x, shape=shape)


class Permute(Function):
    def forward(self, x, axes):
        self.axes = axes
        return np.ascontiguousarray(x.transpose(axes))

    def backward(self, g):
        return (g.transpose(np.argsort(self.axes)),)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    return Permute.apply(x, axes=axes)


def transpose2d(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose2d expects a matrix, got {list(x.shape)}")
    return permute(x, (1, 0))


class Flip(Function):
    def forward(self, x, axes):
        self.axes = axes
        return np.ascontiguousarray(np.flip(x, axis=axes))

    def backward(self, g):
        return (np.flip(g, axis=self.axes),)


def flip(x: Tensor, axes: int | Sequence[int]) -> Tensor:
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    return Flip.apply(x, axes=axes)


def reverse(x: Tensor) -> Tensor:
    """Reverse the order of all elements (every axis flipped)."""
    return flip(x, tuple(range(x.ndim)))


class GetItem(Function):
    def forward(self, x, idx):
        self.idx = idx
        return np.array(x[idx], dtype=DTYPE)

    def backward(self, g):
        (x,) = self.inputs
        out = np.zeros_like(x.data)
        np.add.at(out, self.idx, g)
        return (out,)


def getitem(x: Tensor, idx) -> Tensor:
    return GetItem.apply(x, idx=idx)


class Stack(Function):
    def forward(self, *arrays, axis):
        self.axis = axis
        return np.stack(arrays, axis=axis)

    def backward(self, g):
        return tuple(np.take(g, i, axis=self.axis) for i in range(len(self.inputs)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: mismatched shapes {[list(s) for s in shapes]}")
    return Stack.apply(*tensors, axis=axis)


class BroadcastTo(Function):
    def forward(self, x, shape):
        return np.ascontiguousarray(np.broadcast_to(x, shape))

    def backward(self, g):
        (x,) = self.inputs
        lead = g.ndim - x.ndim
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(x.shape) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-rule expansion of ``x`` to ``shape``."""
    shape = tuple(shape)
    try:
        np.broadcast_shapes(x.shape, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: {list(x.shape)} cannot expand to {list(shape)}") from None
    if np.broadcast_shapes(x.shape, shape) != shape:
        raise DimensionError(f"broadcast_to: {list(x.shape)} cannot expand to {list(shape)}")
    return BroadcastTo.apply(x, shape=shape)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """``[C*r*r, H, W] -> [C, r*H, r*W]``; output (c, r*y+i, r*x+j) reads channel c*r*r + i*r + j."""
    if x.ndim != 3 or x.shape[0] % (r * r):
        raise DimensionError(f"pixel_shuffle(r={r}): bad input shape {list(x.shape)}")
    c, h, w = x.shape[0] // (r * r), x.shape[1], x.shape[2]
    y = reshape(x, (c, r, r, h, w))
    y = permute(y, (0, 3, 1, 4, 2))
    return reshape(y, (c, h * r, w * r))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle`."""
    if x.ndim != 3 or x.shape[1] % r or x.shape[2] % r:
        raise DimensionError(f"pixel_unshuffle(r={r}): bad input shape {list(x.shape)}")
    c, h, w = x.shape[0], x.shape[1] // r, x.shape[2] // r
    y = reshape(x, (c, h, r, w, r))
    y = permute(y, (0, 2, 4, 1, 3))
    return reshape(y, (c * r * r, h, w))


# ---------------------------------------------------------------- convolution

def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


class Conv2d(Function):
    """Grouped cross-correlation on a single ``[C, H, W]`` image."""

    def forward(self, x, w, *maybe_bias, stride, padding, groups):
        c_in, h, wd = x.shape
        c_out, cg, k, _ = w.shape
        self.stride, self.padding, self.groups = stride, padding, groups
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
        self.xp_shape = xp.shape
        ho = conv_output_size(h, k, stride, padding)
        wo = conv_output_size(wd, k, stride, padding)
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
        win = win[:, ::stride, ::stride][:, :ho, :wo]
        # [g, cg, ho, wo, k, k]
        self.win = win.reshape(groups, cg, ho, wo, k, k)
        wg = w.reshape(groups, c_out // groups, cg, k, k)
        out = np.einsum("gocij,gcyxij->goyx", wg, self.win, optimize=True)
        out = out.reshape(c_out, ho, wo)
        if maybe_bias:
            out = out + maybe_bias[0][:, None, None]
        return out

    def backward(self, g):
        x, w = self.inputs[0], self.inputs[1]
        groups, s, p = self.groups, self.stride, self.padding
        c_out, cg, k, _ = w.shape
        ho, wo = g.shape[1], g.shape[2]
        gg = g.reshape(groups, c_out // groups, ho, wo)
        gw = np.einsum("goyx,gcyxij->gocij", gg, self.win, optimize=True).reshape(w.shape)
        wg = w.data.reshape(groups, c_out // groups, cg, k, k)
        gwin = np.einsum("gocij,goyx->gcyxij", wg, gg, optimize=True)
        gwin = gwin.reshape(groups * cg, ho, wo, k, k)
        gxp = np.zeros(self.xp_shape, dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + s * ho:s, j:j + s * wo:s] += gwin[..., i, j]
        gx = gxp[:, p:gxp.shape[1] - p, p:gxp.shape[2] - p] if p else gxp
        grads = [gx, gw]
        if len(self.inputs) == 3:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    if x.ndim != 3 or w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d: expected x[C,H,W], w[O,C,k,k]; got {list(x.shape)}, {list(w.shape)}")
    c_in = x.shape[0]
    c_out, cg, k, _ = w.shape
    if k < 1 or stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid k={k}, stride={stride}, padding={padding}")
    if c_in % groups or c_out % groups or cg * groups != c_in:
        raise DimensionError(f"conv2d: {c_in} input channels incompatible with weight "
                             f"{list(w.shape)} and groups={groups}")
    ho = conv_output_size(x.shape[1], k, stride, padding)
    wo = conv_output_size(x.shape[2], k, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: non-positive output size {ho}x{wo} for input "
                             f"{list(x.shape)}, k={k}, stride={stride}, padding={padding}")
    if bias is not None:
        if bias.shape != (c_out,):
            raise DimensionError(f"conv2d: bias shape {list(bias.shape)} != [{c_out}]")
        return Conv2d.apply(x, w, bias, stride=stride, padding=padding, groups=groups)
    return Conv2d.apply(x, w, stride=stride, padding=padding, groups=groups)


# ---------------------------------------------------------------- normalization

class LayerNorm(Function):
    def forward(self, x, gamma, beta, eps):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.xhat = xc * self.inv_std
        return self.xhat * gamma + beta

    def backward(self, g):
        _, gamma, _ = self.inputs
        xhat = self.xhat
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gxhat = g * gamma.data
        gx = self.inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                             - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the per-feature affine map."""
    d = x.shape[-1] if x.ndim else 0
    if d < 1 or gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: x {list(x.shape)} with gamma {list(gamma.shape)}, "
                             f"beta {list(beta.shape)}")
    if eps < 0:
        raise ValueError("layer_norm: eps must be non-negative")
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {list(a.shape)} and {list(b.shape)} differ")
    d = sub(a, b)
    return mean(mul(d, d))
