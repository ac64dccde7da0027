"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op here takes Tensors (or arrays, which are wrapped as constants) and
returns a new Tensor that remembers its parents and a backward rule. Calling
:func:`backward` on a scalar topologically orders the recorded graph (the
tape) and pushes gradients into every leaf that has ``requires_grad`` set.

Leading batch axes are supported everywhere through numpy broadcasting; the
gradient of a broadcast operand is summed back to that operand's shape.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_node_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """An n-d float64 array with an optional gradient buffer and tape node."""

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.node = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.meta: dict = {}

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return hadamard(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# tape traversal


def topological_order(root: Tensor) -> list[Tensor]:
    """Return the recorded nodes reachable from ``root``, inputs first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node in seen:
            continue
        seen.add(node.node)
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and parent.node not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Intermediate gradients live only for the duration of the call, so calling
    twice on the same graph adds the leaf gradients twice.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {root.node: np.ones_like(root.data)}
    for node in reversed(topological_order(root)):
        g = grads.pop(node.node, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node in grads:
                grads[parent.node] = grads[parent.node] + pg
            else:
                grads[parent.node] = pg


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        ),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def hadamard(a, b) -> Tensor:
    """Element-wise product; ``b`` may broadcast against ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "hadamard")
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def safe_div(a, b) -> Tensor:
    """``a / b`` with the result forced to 0 wherever ``b == 0``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "safe_div")
    zero = b.data == 0
    denom = np.where(zero, 1.0, b.data)
    out = np.where(zero, 0.0, a.data / denom)

    def _back(g):
        g = np.where(zero, 0.0, g)
        return (
            _unbroadcast(g / denom, a.shape),
            _unbroadcast(-g * out / denom, b.shape),
        )

    return _record(out, (a, b), _back)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    active = a.data > 0
    return _record(np.maximum(a.data, 0.0), (a,), lambda g: (g * active,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------------------
# shape


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (both operands ndim >= 2)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}") from None

    def _back(g):
        ga = _contract(g, b.data, a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            bt_shape = b.shape[:-2] + (b.shape[-1], b.shape[-2])
            gb = np.swapaxes(_contract(np.swapaxes(g, -1, -2), np.swapaxes(a.data, -1, -2), bt_shape), -1, -2)
        return ga, gb

    return _record(out, (a, b), _back)


def _contract(G: np.ndarray, O: np.ndarray, target: tuple[int, ...]) -> np.ndarray:
    """Sum of ``G @ O^T`` over the batch axes that ``target`` was broadcast along.

    G is (lead..., p, r), O broadcasts to (lead..., q, r). The summed axes are
    folded into the contraction so no (lead..., p, q) intermediate is built.
    """
    lead = G.shape[:-2]
    O = np.broadcast_to(O, lead + O.shape[-2:])
    tlead = (1,) * (len(lead) - (len(target) - 2)) + tuple(target[:-2])
    summed = [i for i in range(len(lead)) if tlead[i] == 1 and lead[i] != 1]
    if not summed:
        return np.matmul(G, np.swapaxes(O, -1, -2)).reshape(target)
    keep = [i for i in range(len(lead)) if i not in summed]
    perm = keep + [len(lead)] + summed + [len(lead) + 1]
    keep_shape = tuple(lead[i] for i in keep)
    G2 = G.transpose(perm).reshape(keep_shape + (G.shape[-2], -1))
    O2 = O.transpose(perm).reshape(keep_shape + (O.shape[-2], -1))
    return np.matmul(G2, np.swapaxes(O2, -1, -2)).reshape(target)


def transpose(a, axes: tuple[int, int] = (-1, -2)) -> Tensor:
    a = as_tensor(a)
    i, j = axes
    return _record(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),))


def unsqueeze(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return _record(np.expand_dims(a.data, axis), (a,), lambda g: (np.squeeze(g, axis),))


def sum(a, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), _back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def index_select(a, index) -> Tensor:
    """Basic or advanced numpy indexing; gradients scatter-add back."""
    a = as_tensor(a)

    def _back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(a.data[index], (a,), _back)


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")

    def _back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _record(table.data[ids], (table,), _back)


# ---------------------------------------------------------------------------
# attention / regularization / parameterization


def masked_softmax(logits, mask: np.ndarray | None = None, mode: str = "row") -> Tensor:
    """Softmax with masked entries pinned to exactly zero.

    ``mode="row"`` normalizes over the last axis; ``mode="joint"`` over the
    last two axes together. A domain with no unmasked entry comes out all
    zero and is flagged in ``out.meta["empty"]`` (one bool per domain).
    """
    logits = as_tensor(logits)
    if mask is None:
        mask = np.ones(logits.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
    if mode == "row":
        axes: tuple[int, ...] = (-1,)
    elif mode == "joint":
        if logits.ndim < 2:
            raise ShapeError("joint softmax needs at least 2 axes")
        axes = (-2, -1)
    else:
        raise ValueError(f"unknown softmax mode {mode!r}")

    x = np.where(mask, logits.data, -np.inf)
    peak = x.max(axis=axes, keepdims=True)
    empty = ~np.isfinite(peak)
    peak = np.where(empty, 0.0, peak)
    e = np.where(mask, np.exp(np.where(mask, x - peak, 0.0)), 0.0)
    total = e.sum(axis=axes, keepdims=True)
    out = e / np.where(total == 0, 1.0, total)

    def _back(g):
        inner = (g * out).sum(axis=axes, keepdims=True)
        return (out * (g - inner),)

    result = _record(out, (logits,), _back)
    result.meta["empty"] = np.squeeze(empty, axis=axes)
    return result


def dropout(a, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity when ``train`` is false or ``p == 0``."""
    a = as_tensor(a)
    if not train or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in train mode needs a generator")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _record(a.data * keep, (a,), lambda g: (g * keep,))


def weight_norm(v, g) -> Tensor:
    """Effective weight ``g * v / ||v||`` with norms taken over the last axis.

    ``v`` has shape (..., out, in) and ``g`` shape (..., out); each output row
    of the result has Euclidean norm ``|g|``.
    """
    v, g = as_tensor(v), as_tensor(g)
    if v.shape[:-1] != g.shape:
        raise ShapeError(f"weight_norm: gain shape {g.shape} does not match rows of {v.shape}")
    norm = np.sqrt((v.data * v.data).sum(axis=-1, keepdims=True))
    unit = v.data / norm
    out = g.data[..., None] * unit

    def _back(grad):
        proj = (grad * unit).sum(axis=-1)
        gv = (g.data[..., None] / norm) * (grad - proj[..., None] * unit)
        return gv, proj

    return _record(out, (v, g), _back)


def linear(x, weight, bias=None) -> Tensor:
    """``weight @ x + bias`` for x of shape (..., in, cols), weight (out, in)."""
    y = matmul(weight, x)
    if bias is not None:
        y = add(y, unsqueeze(bias, -1))
    return y


def bce_with_logits(scores, targets: np.ndarray) -> Tensor:
    """Binary cross-entropy summed over the last axis, averaged over the rest.

    Written as ``max(x,0) - x*y + log(1 + exp(-|x|))`` so saturated logits
    never hit log(0).
    """
    scores = as_tensor(scores)
    y = np.asarray(targets, dtype=DTYPE)
    if y.shape != scores.shape:
        raise ShapeError(f"bce: scores {scores.shape} vs targets {y.shape}")
    if np.any((y < 0) | (y > 1)):
        raise ValueError("bce targets must lie in [0, 1]")
    x = scores.data
    rows = max(1, int(np.prod(x.shape[:-1])))
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    loss = per.sum() / rows
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(np.asarray(loss), (scores,), lambda g: (g * (sig - y) / rows,))
