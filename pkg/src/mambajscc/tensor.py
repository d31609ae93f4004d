"""N-D float tensors with reverse-mode automatic differentiation.

Every differentiable primitive is a :class:`Function` subclass. Applying one
records the producing function on its output, so the graph reachable from a
scalar loss can be replayed backwards. :class:`Tape` is that replay: the
recorded operations in topological order, visited once each in reverse.

Storage is row-major numpy ``float64``. There is no implicit broadcasting
except between a tensor and a scalar (python number or 0-d tensor); every
other shape alignment goes through an explicit op such as ``broadcast_to``.
"""

from __future__ import annotations

import struct
import threading
from contextlib import contextmanager
from typing import BinaryIO, Iterator, Sequence

import numpy as np

DTYPE = np.float64
MAGIC = b"MJT1"


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class BackwardError(RuntimeError):
    """Raised for invalid backward passes (non-scalar loss, consumed graph)."""


_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


class Function:
    """A differentiable primitive.

    Subclasses implement ``forward`` on raw arrays and ``backward`` which maps
    the output gradient to one gradient (or ``None``) per input tensor.
    """

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs
        self.consumed = False

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs) -> "Tensor":
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        result = Tensor._wrap(out, requires_grad)
        if requires_grad:
            result._ctx = fn
        return result


class Tensor:
    """A real-valued array that can take part in gradient recording."""

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        _check_shape(arr.shape)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._ctx: Function | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=DTYPE)
        _check_shape(arr.shape)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._ctx = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, retain_graph: bool = False) -> None:
        backward(self, retain_graph=retain_graph)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    # operator sugar; definitions live in ops
    def __add__(self, other):
        return ops.add(self, other)

    def __radd__(self, other):
        return ops.add(other, self)

    def __sub__(self, other):
        return ops.sub(self, other)

    def __rsub__(self, other):
        return ops.sub(other, self)

    def __mul__(self, other):
        return ops.mul(self, other)

    def __rmul__(self, other):
        return ops.mul(other, self)

    def __truediv__(self, other):
        return ops.div(self, other)

    def __rtruediv__(self, other):
        return ops.div(other, self)

    def __neg__(self):
        return ops.neg(self)

    def __pow__(self, p: float):
        return ops.power(self, p)

    def __matmul__(self, other):
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        return ops.getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.permute(self, axes)

    @property
    def T(self):
        return ops.transpose2d(self)

    def sum(self):
        return ops.sum(self)

    def mean(self):
        return ops.mean(self)

    def exp(self):
        return ops.exp(self)


def _check_shape(shape: tuple[int, ...]) -> None:
    if any(s <= 0 for s in shape):
        raise DimensionError(f"tensor dimensions must be positive, got {list(shape)}")


def _not_scalar(t: Tensor):
    raise DimensionError(f"item() needs a single-element tensor, got shape {list(t.shape)}")


class Tape:
    """Recorded operations reachable from a loss, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for inp in reversed(node._ctx.inputs):
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))
        return cls([n for n in order if n._ctx is not None] if order else [])

    def run(self, loss: Tensor, retain_graph: bool = False) -> None:
        if any(n._ctx.consumed for n in self.nodes):
            raise BackwardError(
                "graph was already consumed by a previous backward pass; "
                "re-run the forward pass or use retain_graph=True"
            )
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                g = np.zeros_like(node.data)
            node.grad = g
            fn = node._ctx
            in_grads = fn.backward(g)
            for inp, ig in zip(fn.inputs, in_grads):
                if not inp.requires_grad:
                    continue
                if ig is None:
                    ig = np.zeros_like(inp.data)
                if ig.shape != inp.data.shape:
                    raise DimensionError(
                        f"{type(fn).__name__}.backward produced gradient of shape "
                        f"{list(ig.shape)} for input of shape {list(inp.shape)}"
                    )
                key = id(inp)
                grads[key] = grads[key] + ig if key in grads else ig
                if inp._ctx is None:
                    leaves[key] = inp
            if not retain_graph:
                fn.consumed = True
        for key, leaf in leaves.items():
            g = grads[key]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(loss: Tensor, retain_graph: bool = False) -> Tape:
    """Populate ``.grad`` on every tensor that contributed to ``loss``."""
    if loss.data.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad or loss._ctx is None:
        raise BackwardError("nothing recorded: loss does not depend on any tensor requiring grad")
    tape = Tape.from_loss(loss)
    tape.run(loss, retain_graph=retain_graph)
    return tape


# serialization: "MJT1", u32 rank, rank x u32 dims, float64 payload (all little-endian)

def write_tensor(f: BinaryIO, t: Tensor | np.ndarray) -> None:
    arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
    f.write(MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes(order="C"))


def read_tensor(f: BinaryIO) -> Tensor:
    magic = f.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", f.read(4))
    dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
    count = int(np.prod(dims)) if rank else 1
    payload = f.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError("truncated tensor payload")
    return Tensor._wrap(np.frombuffer(payload, dtype="<f8").astype(DTYPE).reshape(dims))


def save_tensor(path, t: Tensor | np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, t)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        return read_tensor(f)


def tensor(data: Sequence | np.ndarray | float, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


from . import ops  # noqa: E402  (operator methods above dispatch here)
