"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation records its parents and a closure mapping the
output gradient to one gradient per parent. ``Tensor.backward`` walks the
recorded graph in reverse topological order and accumulates into the ``grad``
of leaf tensors that require it.
"""
from __future__ import annotations

import contextlib
import struct
from typing import BinaryIO, Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """An n-dimensional array that can take part in reverse-mode autodiff."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if requires_grad and not np.issubdtype(arr.dtype, np.floating):
            raise ContractError(f"only floating tensors can require gradients, got {arr.dtype}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autodiff ---------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate gradients from this scalar to every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ContractError("loss is not connected to any tensor that requires grad")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ----------------------------------------------------------

    def _lift(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        other = self._lift(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return _record(a.data + b.data, (a, b), bw)

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return _record(a.data - b.data, (a, b), bw)

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return _record(a.data * b.data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        a, b = self, other

        def bw(g):
            ga = g / b.data
            return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

        return _record(a.data / b.data, (a, b), bw)

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __neg__(self):
        return _record(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise ContractError("only scalar exponents are supported")
        a = self

        def bw(g):
            return (g * exponent * a.data ** (exponent - 1),)

        return _record(a.data**exponent, (a,), bw)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        a = self

        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, index, g)
            return (full,)

        return _record(a.data[index], (a,), bw)

    # -- elementwise math ---------------------------------------------------

    def exp(self) -> Tensor:
        out = np.exp(self.data)
        return _record(out, (self,), lambda g: (g * out,))

    def log(self) -> Tensor:
        a = self
        return _record(np.log(a.data), (a,), lambda g: (g / a.data,))

    def sqrt(self) -> Tensor:
        out = np.sqrt(self.data)
        return _record(out, (self,), lambda g: (g * 0.5 / out,))

    # -- reductions and shape ----------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, _normalize_axes(axis, a.ndim))
            return (np.broadcast_to(g, a.shape).copy(),)

        return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        if axis is None:
            n = self.data.size
        else:
            n = int(np.prod([self.shape[i] for i in _normalize_axes(axis, self.ndim)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return _record(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),))

    def swapaxes(self, a1: int, a2: int) -> Tensor:
        axes = list(range(self.ndim))
        axes[a1], axes[a2] = axes[a2], axes[a1]
        return self.transpose(tuple(axes))

    @property
    def T(self) -> Tensor:
        return self.transpose()


class Parameter(Tensor):
    """A trainable leaf tensor. ``name`` is filled in by the owning module."""

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(np.array(data, dtype=dtype), requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape}, dtype={self.dtype})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _record(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def record(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Create a graph node. Used by kernels defined outside this module."""
    return _record(data, tuple(parents), backward)


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; deep encoders overflow the recursion limit
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(np.matmul(a.data, b.data), (a, b), bw)


# -- serialization ------------------------------------------------------------
#
# Layout: rank (int64 LE), extents (int64 LE each), dtype tag (int64 LE),
# then row-major little-endian data.

_DTYPE_TAGS = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def write_tensor(fh: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype not in _DTYPE_TAGS:
        raise ContractError(f"cannot serialize dtype {array.dtype}")
    fh.write(struct.pack("<q", array.ndim))
    fh.write(struct.pack(f"<{array.ndim}q", *array.shape))
    fh.write(struct.pack("<q", _DTYPE_TAGS[array.dtype]))
    fh.write(np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    (rank,) = struct.unpack("<q", _read_exact(fh, 8))
    if rank < 0 or rank > 32:
        raise ContractError(f"corrupt tensor header: rank {rank}")
    shape = struct.unpack(f"<{rank}q", _read_exact(fh, 8 * rank))
    (tag,) = struct.unpack("<q", _read_exact(fh, 8))
    if tag not in _TAG_DTYPES:
        raise ContractError(f"corrupt tensor header: dtype tag {tag}")
    dtype = _TAG_DTYPES[tag]
    count = int(np.prod(shape, dtype=np.int64))
    raw = _read_exact(fh, count * dtype.itemsize)
    return np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ContractError(f"truncated tensor file: wanted {n} bytes, got {len(buf)}")
    return buf
