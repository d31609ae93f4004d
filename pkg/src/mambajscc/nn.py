"""Parameter containers and the basic layers the codec is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import DTYPE, DimensionError, Tensor

INIT_STD = 0.02


def fan_in_std(fan_in: int) -> float:
    return 1.0 / np.sqrt(fan_in)


def param(arr: np.ndarray) -> Tensor:
    return Tensor._wrap(np.asarray(arr, dtype=DTYPE).copy(), requires_grad=True)


class Module:
    """Base class: parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = params.keys() - state.keys()
        extra = state.keys() - params.keys()
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=DTYPE)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {list(arr.shape)} != {list(p.shape)}")
            p.data = arr.copy()


class Linear(Module):
    """Fully connected layer applied along the leading (feature) axis.

    Accepts ``[in]``, ``[in, L]`` or ``[in, h, w]``; the trailing axes are
    treated as independent tokens.
    """

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, std: float | None = None):
        self.in_features = in_features
        std = INIT_STD if std is None else std
        self.out_features = out_features
        self.weight = param(rng.normal(0.0, std, size=(out_features, in_features)))
        self.bias = param(np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[0] != self.in_features:
            raise DimensionError(f"Linear({self.in_features}->{self.out_features}) got {list(x.shape)}")
        tail = x.shape[1:]
        tokens = int(np.prod(tail)) if tail else 1
        y = ops.matmul(self.weight, ops.reshape(x, (self.in_features, tokens)))
        if self.bias is not None:
            b = ops.reshape(self.bias, (self.out_features, 1))
            y = ops.add(y, ops.broadcast_to(b, (self.out_features, tokens)))
        return ops.reshape(y, (self.out_features, *tail))


class ChannelLayerNorm(Module):
    """Layer norm over the channel axis of a ``[c, h, w]`` grid."""

    def __init__(self, channels: int, eps: float = 1e-5):
        self.channels = channels
        self.eps = eps
        self.gamma = param(np.ones(channels))
        self.beta = param(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.permute(x, (1, 2, 0))
        y = ops.layer_norm(y, self.gamma, self.beta, self.eps)
        return ops.permute(y, (2, 0, 1))


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 groups: int = 1, bias: bool = True, std: float | None = None):
        fan_in = (in_channels // groups) * kernel_size * kernel_size
        std = INIT_STD if std is None else std
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.groups = groups
        shape = (out_channels, in_channels // groups, kernel_size, kernel_size)
        self.weight = param(rng.normal(0.0, std, size=shape))
        self.bias = param(np.zeros(out_channels)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride,
                          padding=self.padding, groups=self.groups)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        return ops.conv_output_size(h, k, s, p), ops.conv_output_size(w, k, s, p)
