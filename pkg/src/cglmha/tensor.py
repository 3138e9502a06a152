"""
Dense tensors with define-by-run reverse-mode differentiation.

Every operation returns a new :class:`Tensor`. When any input requires a
gradient, the output keeps references to its inputs together with a local
backward rule, and is appended to the active :class:`GradTape` (if one is
open). :func:`backward` replays either an explicit tape or the graph reachable
from the loss in reverse topological order.

Binary elementwise operations require identical shapes. The only implicit
broadcast is scalar-by-tensor (:func:`scale`, :func:`add_scalar`); adding a
per-feature bias is the explicit :func:`add_bias`.
"""
import math
import threading
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _tape_stack():
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


class Tensor:
    """A dense array that may participate in an autodiff graph.

    Attributes:
        data: the values, a C-ordered numpy array (row-major, as flat storage).
        requires_grad: whether gradients should flow to this tensor.
        grad: accumulated gradient for leaf tensors, same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.array(data, dtype=dtype if dtype is not None else _infer_dtype(data), order="C")
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    @classmethod
    def _op(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = not getattr(_state, "no_grad", False) and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
            stack = _tape_stack()
            if stack:
                stack[-1].nodes.append(out)
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _infer_dtype(data):
    if isinstance(data, np.ndarray) and data.dtype.kind == "f":
        return data.dtype
    return DEFAULT_DTYPE


def tensor(data, requires_grad=False, dtype=None, name=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def constant_like(ref, values):
    """Wrap ``values`` as a non-differentiable tensor in ``ref``'s dtype."""
    return Tensor(np.asarray(values, dtype=ref.dtype), dtype=ref.dtype)


class no_grad:
    """Context manager under which no operation records a backward rule."""

    def __enter__(self):
        self._prev = getattr(_state, "no_grad", False)
        _state.no_grad = True
        return self

    def __exit__(self, *exc):
        _state.no_grad = self._prev
        return False


class GradTape:
    """Records differentiable operations in execution order.

    Use as a context manager; operations performed inside the block on
    tensors that require gradients are appended to :attr:`nodes`. Recording
    order is a topological order of the graph.
    """

    def __init__(self):
        self.nodes: List[Tensor] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def backward(self, loss):
        return backward(loss, self)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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


def backward(loss: Tensor, tape: Optional[GradTape] = None):
    """Populate ``.grad`` of every leaf that requires a gradient.

    Gradients add up when a tensor is used more than once, and they also add
    onto any gradient already stored on a leaf. Returns the list of leaves
    that received a gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    nodes = tape.nodes if tape is not None else _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[id(node)] = (node, g)
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._backward is None:
                prev = leaves.get(id(p))
                leaves[id(p)] = (p, pg if prev is None else prev[1] + pg)
            else:
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
    if tape is not None and id(loss) in grads and loss._backward is None:
        leaves[id(loss)] = (loss, grads.pop(id(loss)))
    out = []
    for leaf, g in leaves.values():
        g = np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        out.append(leaf)
    return out


def _check_same(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an (m, k) and a (k, n) tensor."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return Tensor._op(A @ B, (a, b), bw)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product: (n, m, k) x (n, k, p) -> (n, m, p)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        ga = np.matmul(g, B.transpose(0, 2, 1)) if a.requires_grad else None
        gb = np.matmul(A.transpose(0, 2, 1), g) if b.requires_grad else None
        return ga, gb

    return Tensor._op(np.matmul(A, B), (a, b), bw)


def linear(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w`` over the last axis of ``x`` (any leading dims), ``w`` of shape (k, n)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1]))
    return reshape(matmul(flat, w), lead + (w.shape[1],))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return Tensor._op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return Tensor._op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    A, B = a.data, b.data
    return Tensor._op(A * B, (a, b), lambda g: (g * B, g * A))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return Tensor._op(x.data * c, (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return Tensor._op(x.data + c, (x,), lambda g: (g,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector ``b`` of length ``x.shape[-1]`` to every row of ``x``."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return Tensor._op(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return Tensor._op(y, (x,), lambda g: (g * y * (1 - y),))


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._op(y, (x,), lambda g: (g * (1 - y * y),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor._op(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor._op(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    X = x.data
    return Tensor._op(np.log(X), (x,), lambda g: (g / X,))


def elementwise(op: str, *inputs, c=None) -> Tensor:
    """Dispatch by name; ``scale`` takes the scalar through ``c``."""
    unary = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "exp": exp, "log": log}
    binary = {"add": add, "sub": sub, "mul": mul}
    if op in unary:
        (x,) = inputs
        return unary[op](x)
    if op in binary:
        a, b = inputs
        return binary[op](a, b)
    if op == "scale":
        (x,) = inputs
        return scale(x, c)
    raise ValueError(f"unknown elementwise op {op!r}")


def _axis(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._op(y, (x,), bw)


def masked_softmax(x: Tensor, keep: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax where positions with ``keep == False`` get exactly zero weight.

    ``keep`` must have the shape of ``x``. A slice with nothing kept is a
    contract violation.
    """
    axis = _axis(x, axis)
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != x.shape:
        raise ShapeError(f"masked_softmax: mask {keep.shape} vs input {x.shape}")
    if not keep.any(axis=axis).all():
        raise ContractError("masked_softmax: some slice has every position masked")
    z = np.where(keep, x.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.where(keep, np.exp(z), 0).astype(x.dtype)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._op(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return Tensor._op(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    axis = _axis(tensors[0], axis)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} on axis {axis}")
    if len(tensors) == 1:
        return tensors[0]
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return out

    return Tensor._op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ShapeError(f"stack: shape {t.shape} differs from {shape}")
    axis = axis % (len(shape) + 1)

    def bw(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return Tensor._op(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select one position along ``axis``, dropping that axis."""
    axis = _axis(x, axis)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        sl = [slice(None)] * len(shape)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return Tensor._op(np.ascontiguousarray(np.take(x.data, index, axis=axis)), (x,), bw)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    axis = _axis(x, axis)
    if start < 0 or length < 1 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {start + length}) outside axis of size {x.shape[axis]}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[sl] = g
        return (full,)

    return Tensor._op(np.ascontiguousarray(x.data[sl]), (x,), bw)


def pad_zeros(x: Tensor, axis: int, before: int, after: int) -> Tensor:
    axis = _axis(x, axis)
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(before, before + x.shape[axis])
    sl = tuple(sl)
    return Tensor._op(np.pad(x.data, widths), (x,), lambda g: (g[sl],))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor._op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    inv = tuple(np.argsort(axes))
    return Tensor._op(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape
    if axis is None:
        return Tensor._op(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, shape),))
    axis = _axis(x, axis)
    return Tensor._op(
        x.data.sum(axis=axis), (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape),)
    )


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[_axis(x, axis)]
    return scale(reduce_sum(x, axis), 1.0 / n)


def gather_rows(table: Tensor, ids, skip=None) -> Tensor:
    """Look up rows of a 2-D ``table`` by integer ``ids`` (any shape).

    Positions whose id equals ``skip`` produce zero rows and send no gradient
    back to the table.
    """
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ContractError(f"ids must be integers, got {ids.dtype}")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"id out of range for table with {n} rows")
    out = table.data[ids]
    live = None
    if skip is not None:
        live = ids != skip
        out = out * live[..., None].astype(table.dtype)
    shape, dtype = table.shape, table.dtype

    def bw(g):
        flat_ids = ids.reshape(-1)
        flat_g = g.reshape(-1, shape[1])
        if live is not None:
            keep = live.reshape(-1)
            flat_ids, flat_g = flat_ids[keep], flat_g[keep]
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, flat_ids, flat_g)
        return (full,)

    return Tensor._op(np.ascontiguousarray(out), (table,), bw)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Register an op with a hand-written backward rule.

    ``backward_fn(g)`` receives the upstream gradient and returns one array
    (or None) per parent.
    """
    return Tensor._op(data, tuple(parents), backward_fn)


def finite_diff_grad(f: Callable[[], float], theta: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of the scalar ``f()`` with respect to ``theta``.

    ``theta.data`` is perturbed in place one coordinate at a time and restored
    afterwards. For meaningful results ``theta`` should be float64.
    """
    if not h > 0:
        raise ContractError("finite-difference step must be positive")
    flat = theta.data.reshape(-1)
    out = np.empty(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f())
        flat[i] = orig - h
        fm = _scalar(f())
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite objective while differencing coordinate {i}")
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(theta.shape)


def _scalar(v):
    if isinstance(v, Tensor):
        v = v.data
    return float(np.asarray(v, dtype=np.float64).reshape(-1)[0])


def relative_error(a, b, floor: float = 1e-8, elementwise: bool = False) -> float:
    """Relative disagreement between two gradient arrays.

    By default this is ``max|a - b| / max(max|a|, max|b|, floor)``, i.e. the
    error scaled by the largest entry of the group. Central differences carry
    an absolute error of roughly ``eps / h`` on every coordinate, so dividing
    coordinate-by-coordinate blows up on entries that are nearly zero.
    ``elementwise=True`` gives the per-coordinate ratio instead.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not a.size:
        return 0.0
    diff = np.abs(a - b)
    if elementwise:
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
        return float((diff / denom).max())
    denom = max(float(np.abs(a).max()), float(np.abs(b).max()), floor)
    return float(diff.max() / denom)
