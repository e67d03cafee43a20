"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations on :class:`Array` values are recorded on the active :class:`Tape`
while one is open::

    with Tape() as tape:
        loss = mean(square(matmul(x, w) - y))
    tape.backward(loss)
    w.grad

Broadcasting is limited to scalars and to operands whose shape is a trailing
suffix of the other operand's shape (leading-axis broadcasting).
"""

import contextvars
import json
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from stl_sdt.errors import CheckpointError, ShapeError

ArrayLike = Union["Array", np.ndarray, float, int]
Vjp = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "stl_sdt_active_tape", default=None
)


class Array:
    """A float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(
        self, data: Any, requires_grad: bool = False, name: Optional[str] = None
    ) -> None:
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Array{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: ArrayLike) -> "Array":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Array":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Array":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Array":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Array":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Array":
        return mul(other, self)

    def __truediv__(self, other: float) -> "Array":
        if isinstance(other, Array):
            raise TypeError("division is only supported by constants")
        return mul(self, 1.0 / float(other))

    def __neg__(self) -> "Array":
        return mul(self, -1.0)

    def __matmul__(self, other: "Array") -> "Array":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Array":
        return slice_(self, index)

    @property
    def T(self) -> "Array":
        return transpose(self)


class Tape:
    """Ordered record of primitive operations for one backward pass."""

    def __init__(self) -> None:
        self.nodes: List[Tuple[Array, Tuple[Array, ...], Vjp]] = []
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        if self._token is not None:
            _ACTIVE_TAPE.reset(self._token)
            self._token = None

    def record(self, out: Array, inputs: Tuple[Array, ...], vjp: Vjp) -> None:
        self.nodes.append((out, inputs, vjp))

    def backward(self, loss: Array) -> None:
        """Accumulate ``d loss / d leaf`` into every leaf's ``grad`` buffer.

        Nodes are visited exactly once, in reverse recording order.
        """
        if loss.data.size != 1:
            raise ShapeError("backward", loss.shape, ())
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        # Arrays never produced by a recorded node are leaves.
        produced = {id(out) for out, _, _ in self.nodes}
        leaves: Dict[int, Array] = {}
        for out, inputs, vjp in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gin in zip(inputs, vjp(g)):
                if gin is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = grads[key] + gin if key in grads else gin
                if key not in produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
            leaf.grad = leaf.grad + grads[key]


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def as_array(value: ArrayLike) -> Array:
    return value if isinstance(value, Array) else Array(value)


def _emit(data: np.ndarray, inputs: Tuple[Array, ...], vjp: Vjp) -> Array:
    out = Array(data)
    if any(inp.requires_grad for inp in inputs):
        out.requires_grad = True
        tape = _ACTIVE_TAPE.get()
        if tape is not None:
            tape.record(out, inputs, vjp)
    return out


def _broadcast_shape(primitive: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    if a == b:
        return a
    if len(a) == 0 or a == (1,):
        return b
    if len(b) == 0 or b == (1,):
        return a
    if len(a) > len(b) and a[len(a) - len(b) :] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a) :] == a:
        return b
    raise ShapeError(primitive, a, b)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    if shape == (1,):
        return g.sum().reshape(1)
    # _broadcast_shape only aligns trailing axes, so the extra axes lead.
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# Elementwise


def add(a: ArrayLike, b: ArrayLike) -> Array:
    a, b = as_array(a), as_array(b)
    _broadcast_shape("add", a.shape, b.shape)
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Array:
    a, b = as_array(a), as_array(b)
    _broadcast_shape("sub", a.shape, b.shape)
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Array:
    a, b = as_array(a), as_array(b)
    _broadcast_shape("mul", a.shape, b.shape)
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def square(a: Array) -> Array:
    return _emit(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def tanh(a: Array) -> Array:
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a: Array) -> Array:
    y = np.exp(a.data)
    return _emit(y, (a,), lambda g: (g * y,))


def log(a: Array) -> Array:
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def gelu(a: Array) -> Array:
    """Tanh approximation of GELU, composed from recorded primitives."""
    c = float(np.sqrt(2.0 / np.pi))
    inner = mul(add(a, mul(mul(square(a), a), 0.044715)), c)
    return mul(mul(a, 0.5), add(tanh(inner), 1.0))


def masked_fill(a: Array, mask: np.ndarray, value: float) -> Array:
    """Replace entries where ``mask`` is true by the constant ``value``."""
    mask = np.asarray(mask, dtype=bool)
    try:
        mask = np.broadcast_to(mask, a.shape)
    except ValueError as e:
        raise ShapeError("masked_fill", a.shape, mask.shape) from e
    return _emit(np.where(mask, value, a.data), (a,), lambda g: (np.where(mask, 0.0, g),))


# Shapes


def broadcast(a: Array, shape: Sequence[int]) -> Array:
    shape = tuple(shape)
    _broadcast_shape("broadcast", a.shape, shape)
    return _emit(
        np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, a.shape),)
    )


def reshape(a: Array, shape: Sequence[int]) -> Array:
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError("reshape", a.shape, tuple(shape)) from e
    return _emit(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Array, axes: Optional[Sequence[int]] = None) -> Array:
    """Permute axes; by default swap the last two."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose", a.shape)
        axes = list(range(a.ndim - 2)) + [a.ndim - 1, a.ndim - 2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def _is_basic_index(index: Any) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(i is None or i is Ellipsis or isinstance(i, (slice, int)) for i in items)


def slice_(a: Array, index: Any) -> Array:
    basic = _is_basic_index(index)

    def vjp(g: np.ndarray) -> Tuple[np.ndarray]:
        out = np.zeros_like(a.data)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _emit(a.data[index], (a,), vjp)


def concat(arrays: Sequence[Array], axis: int = -1) -> Array:
    arrays = [as_array(x) for x in arrays]
    try:
        data = np.concatenate([x.data for x in arrays], axis=axis)
    except ValueError as e:
        raise ShapeError("concat", *[x.shape for x in arrays]) from e
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]

    def vjp(g: np.ndarray) -> Tuple[np.ndarray, ...]:
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(data, tuple(arrays), vjp)


def gather(table: Array, indices: np.ndarray) -> Array:
    """Embedding lookup: rows of ``table`` selected by integer ``indices``."""
    indices = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2 or (indices.size and (indices.min() < 0 or indices.max() >= table.shape[0])):
        raise ShapeError("gather", table.shape, indices.shape)

    def vjp(g: np.ndarray) -> Tuple[np.ndarray]:
        out = np.zeros_like(table.data)
        # Repeated indices accumulate.
        np.add.at(out, indices, g)
        return (out,)

    return _emit(table.data[indices], (table,), vjp)


# Linear algebra and reductions


def matmul(a: Array, b: Array) -> Array:
    """``a @ b`` for ``(..., m, k) @ (k, n)`` or equally batched operands."""
    a, b = as_array(a), as_array(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)

    def vjp(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        # A shared (k, n) weight collects the gradient of every batch entry.
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return _emit(a.data @ b.data, (a, b), vjp)


def sum_(a: Array, axis: Optional[int] = None, keepdims: bool = False) -> Array:
    def vjp(g: np.ndarray) -> Tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), vjp)


def mean(a: Array, axis: Optional[int] = None, keepdims: bool = False) -> Array:
    count = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis, keepdims), 1.0 / count)


def softmax(a: Array) -> Array:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g: np.ndarray) -> Tuple[np.ndarray]:
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (a,), vjp)


def layer_norm(a: Array, eps: float = 1e-5) -> Array:
    """Normalize the last axis to zero mean and unit variance (no affine terms)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def vjp(g: np.ndarray) -> Tuple[np.ndarray]:
        g_mean = g.mean(axis=-1, keepdims=True)
        gx_mean = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - g_mean - xhat * gx_mean),)

    return _emit(xhat, (a,), vjp)


# Parameter maps


def save_parameters(params: Dict[str, Array], path: Union[str, Path]) -> None:
    """Write ``name -> {shape, values}`` as JSON; floats round-trip exactly."""
    payload = {
        name: {"shape": list(p.shape), "values": p.data.ravel().tolist()}
        for name, p in sorted(params.items())
    }
    Path(path).write_text(json.dumps(payload, allow_nan=False), encoding="utf-8")


def load_parameters(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read parameters from {path}: {e}") from e
    out: Dict[str, np.ndarray] = {}
    for name, entry in payload.items():
        try:
            values = np.array(entry["values"], dtype=np.float64)
            out[name] = values.reshape(entry["shape"])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"malformed parameter '{name}' in {path}") from e
    return out
