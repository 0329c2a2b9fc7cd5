"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure pushing adjoints back to them.  A fresh graph is recorded on every
forward pass; :func:`backward` sweeps it once in reverse topological order.

Leading batch axes are supported by the ops that the model needs them for
(``matmul``, the elementwise family, softmax and the reductions), which lets a
window of equally sized cross-sections run through one graph.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass

import numpy as np

STD_EPS = 1e-12
NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DegenerateRowError(ValueError):
    """A masked softmax row has no admissible entry."""


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple["Tensor", ...] = (), backward: Callable | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, op, parents, backward) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(value, requires_grad=needs, op=op,
                  parents=parents if needs else (), backward=backward if needs else None)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting)

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.value + b.value, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(a.value - b.value, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.shape))

    return _node(a.value * b.value, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.value, b.shape))

    return _node(out, "div", (a, b), bw)


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    x = as_tensor(x)
    scale = np.where(x.value > 0, 1.0, slope)

    def bw(g):
        x._accumulate(g * scale)

    return _node(x.value * scale, "leaky_relu", (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul expects operands with at least two axes")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape))

    return _node(a.value @ b.value, "matmul", (a, b), bw)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty sequence")
    if len(ts) == 1:
        return ts[0]
    ax = axis % ts[0].ndim
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat shapes disagree off axis {axis}: {ref} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _node(np.concatenate([t.value for t in ts], axis=ax), "concat", tuple(ts), bw)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in ts], axis=axis)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        x._accumulate(g.reshape(x.shape))

    return _node(x.value.reshape(shape), "reshape", (x,), bw)


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        x._accumulate(np.swapaxes(g, a1, a2))

    return _node(np.swapaxes(x.value, a1, a2), "swapaxes", (x,), bw)


def index_select(x: Tensor, index) -> Tensor:
    x = as_tensor(x)

    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in parts)

    def bw(g):
        full = np.zeros_like(x.value)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        x._accumulate(full)

    return _node(x.value[index], "index", (x,), bw)


def take(x: Tensor, idx, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    ax = axis % x.ndim

    def bw(g):
        full = np.zeros_like(x.value)
        sl = [slice(None)] * x.ndim
        sl[ax] = idx
        np.add.at(full, tuple(sl), g)
        x._accumulate(full)

    return _node(np.take(x.value, idx, axis=ax), "take", (x,), bw)


# ---------------------------------------------------------------------------
# reductions

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _node(x.value.sum(axis=axis, keepdims=keepdims), "sum", (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.value.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reduce_stats(x: Tensor, axis: int = -1, keepdims: bool = False) -> tuple[Tensor, Tensor]:
    """Population mean and standard deviation along ``axis``.

    The forward std is exact; its adjoint divides by ``sqrt(var + 1e-12)`` so a
    constant slice produces a zero gradient instead of a division by zero.
    """
    x = as_tensor(x)
    n = x.shape[axis]
    if n < 1:
        raise ShapeError("reduce_stats over an empty axis")
    mu = x.value.mean(axis=axis, keepdims=True)
    centered = x.value - mu
    var = (centered * centered).mean(axis=axis, keepdims=True)
    std = np.sqrt(var)
    guarded = np.sqrt(var + STD_EPS)

    def squeeze(v):
        return v if keepdims else np.squeeze(v, axis=axis)

    def expand(g):
        return g if keepdims else np.expand_dims(g, axis)

    def bw_mean(g):
        x._accumulate(np.broadcast_to(expand(g) / n, x.shape))

    def bw_std(g):
        x._accumulate(expand(g) * centered / (n * guarded))

    mean_t = _node(squeeze(mu), "mean", (x,), bw_mean)
    std_t = _node(squeeze(std), "std", (x,), bw_std)
    return mean_t, std_t


def l2_norm(x: Tensor, axis=None) -> Tensor:
    """Euclidean norm; the adjoint is ``x / (|x| + 1e-12)`` (zero at the origin)."""
    x = as_tensor(x)
    norm = np.sqrt((x.value * x.value).sum(axis=axis, keepdims=True))

    def bw(g):
        gg = g if axis is None else np.expand_dims(g, axis)
        x._accumulate(gg * x.value / (norm + NORM_EPS))

    out = norm.reshape(()) if axis is None else np.squeeze(norm, axis=axis)
    return _node(out, "l2_norm", (x,), bw)


# ---------------------------------------------------------------------------
# softmax family

def _softmax_backward(x: Tensor, y: np.ndarray, axis: int):
    def bw(g):
        x._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))
    return bw


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _node(y, "softmax", (x,), _softmax_backward(x, y, axis))


def masked_softmax(x: Tensor, mask, axis: int = -1) -> Tensor:
    """Softmax restricted to entries where ``mask`` is 1; the rest get exactly 0."""
    x = as_tensor(x)
    keep = np.broadcast_to(np.asarray(mask) != 0, x.shape)
    if not keep.any(axis=axis).all():
        raise DegenerateRowError("masked_softmax: a row has every entry masked out")
    z = np.where(keep, x.value, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.where(keep, np.exp(z), 0.0)
    y = e / e.sum(axis=axis, keepdims=True)
    return _node(y, "masked_softmax", (x,), _softmax_backward(x, y, axis))


# ---------------------------------------------------------------------------
# backward sweep

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray] | None:
    """Propagate d(loss)/d(node) to every node that requires a gradient.

    When ``params`` maps names to leaf tensors, returns their gradients
    (zeros for leaves the loss does not depend on).
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {loss.shape}")
    if loss.requires_grad:
        loss.grad = np.ones_like(loss.value)
        for node in reversed(_topo_order(loss)):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
    if params is None:
        return None
    return {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.value))
            for name, t in params.items()}


# ---------------------------------------------------------------------------
# parameters

@dataclass
class Parameter:
    name: str
    tensor: Tensor
    trainable: bool = True


class ParamSet:
    """Ordered, uniquely named parameters.

    Values live here between passes; :meth:`leaves` hands out fresh leaf
    tensors for a single recorded forward pass.
    """

    def __init__(self, params: Iterable[Parameter] = ()):
        self._params: dict[str, Parameter] = {}
        for p in params:
            self.add(p)

    def add(self, p: Parameter) -> None:
        if p.name in self._params:
            raise KeyError(f"duplicate parameter name {p.name!r}")
        self._params[p.name] = p

    def new(self, name: str, value, trainable: bool = True) -> None:
        self.add(Parameter(name, Tensor(value), trainable))

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def values(self) -> dict[str, np.ndarray]:
        return {k: p.tensor.value for k, p in self._params.items()}

    def count(self) -> int:
        return int(sum(p.tensor.value.size for p in self._params.values()))

    def leaves(self, record: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(p.tensor.value, requires_grad=record and p.trainable)
                for k, p in self._params.items()}

    def assign(self, values: Mapping[str, np.ndarray]) -> None:
        for k, v in values.items():
            p = self._params[k]
            v = np.asarray(v, dtype=np.float64)
            if v.shape != p.tensor.shape:
                raise ShapeError(f"parameter {k!r}: expected {p.tensor.shape}, got {v.shape}")
            p.tensor = Tensor(v.copy())

    def copy(self) -> "ParamSet":
        return ParamSet(Parameter(p.name, Tensor(p.tensor.value.copy()), p.trainable) for p in self)


# ---------------------------------------------------------------------------
# finite-difference check

def grad_check(fn: Callable, point, step: float = 1e-5, floor: float = 1e-6) -> float:
    """Worst relative error between backprop and central differences.

    ``point`` is an array or a mapping of named arrays; ``fn`` receives the
    matching Tensor (or dict of Tensors) and must return a scalar Tensor.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    """
    named = isinstance(point, Mapping)
    base = {k: np.array(v, dtype=np.float64) for k, v in (point.items() if named else [("x", point)])}

    def call(arrays, record):
        ts = {k: Tensor(v, requires_grad=record) for k, v in arrays.items()}
        out = fn(ts if named else ts["x"])
        return out, ts

    out, ts = call(base, True)
    grads = backward(out, ts)
    worst = 0.0
    for k, v in base.items():
        flat = v.reshape(-1)
        analytic = grads[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = call(base, False)[0].item()
            flat[i] = orig - step
            down = call(base, False)[0].item()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            err = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), floor)
            worst = max(worst, err)
    return worst
