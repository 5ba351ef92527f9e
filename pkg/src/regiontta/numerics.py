"""Dense float64 tensors with a small reverse-mode autodiff engine.

Every differentiable primitive records a node holding its inputs and a
closure that maps the upstream gradient to per-input contributions.
``backward`` walks the recorded nodes in exact reverse construction order,
summing contributions whenever a tensor feeds more than one consumer.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

EPS_NORM = 1e-12

_seq = itertools.count()


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "op", "parents", "_backward", "_seq")

    def __init__(self, value, requires_grad: bool = False):
        arr = np.array(value, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor values must be finite")
        self.value = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._seq = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> Tensor:
        return Tensor(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, value: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{op}: produced non-finite output")
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.op = op
    out._seq = next(_seq)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.parents = tuple(inputs)
        out._backward = backward
    else:
        out.requires_grad = False
        out.parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shapes(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("add", a, b)
    return _record(
        "add",
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("mul", a, b)
    return _record(
        "mul",
        a.value * b.value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record("scale", a.value * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _record(
        "matmul",
        a.value @ b.value,
        (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def linear(x, W, b) -> Tensor:
    """``x @ W + b`` for a row batch ``x``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.value.ndim != 2 or W.value.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {W.shape}")
    if b.shape != (W.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {W.shape}")
    return _record(
        "linear",
        x.value @ W.value + b.value,
        (x, W, b),
        lambda g: (g @ W.value.T, x.value.T @ g, g.sum(axis=0)),
    )


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {a.shape}")
    return _record("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _record("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError instead
        out = np.exp(a.value)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.value <= 0):
        raise ValueError("log: input must be strictly positive")
    return _record("log", np.log(a.value), (a,), lambda g: (g / a.value,))


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.value.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record("sum", np.asarray(out, dtype=np.float64), (a,), back)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    if a.value.size == 0:
        raise ShapeError("mean: empty tensor")
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def dot(a, b) -> Tensor:
    """Inner product of two vectors, or row-wise inner products of two batches."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.value.ndim not in (1, 2):
        raise ShapeError(f"dot: shapes {a.shape} and {b.shape} do not conform")
    return sum(mul(a, b), axis=-1 if a.value.ndim == 2 else None)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.value[index]

    def back(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        return (full,)

    return _record("getitem", np.array(out, dtype=np.float64), (a,), back)


def l2_normalize(a, axis: int = -1) -> Tensor:
    """``x / max(||x||, eps)`` along ``axis``."""
    a = as_tensor(a)
    norm = np.sqrt((a.value**2).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, EPS_NORM)
    out = a.value / denom
    active = norm > EPS_NORM

    def back(g):
        # inside the guard the map is x / eps, a plain scaling
        radial = (g * out).sum(axis=axis, keepdims=True)
        return (np.where(active, (g - out * radial) / denom, g / denom),)

    return _record("l2_normalize", out, (a,), back)


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shift = a.value.max(axis=axis, keepdims=True)
    e = np.exp(a.value - shift)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(np.log(s) + shift, axis=axis)
    soft = e / s
    return _record("logsumexp", out, (a,), lambda g: (np.expand_dims(g, axis) * soft,))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shift = a.value.max(axis=axis, keepdims=True)
    z = a.value - shift
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def back(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", out, (a,), back)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", out, (a,), back)


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


@dataclass
class Graph:
    """Recorded primitive applications reachable from ``outputs``.

    ``nodes`` is in construction order, so reversing it is a valid
    topological order for gradient propagation.
    """

    nodes: list[Tensor] = field(default_factory=list)
    outputs: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, *outputs: Tensor) -> Graph:
        seen: dict[int, Tensor] = {}
        stack = [t for t in outputs if t.requires_grad]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen[id(t)] = t
            stack.extend(p for p in t.parents if p.requires_grad)
        nodes = sorted(seen.values(), key=lambda t: t._seq)
        return cls(nodes=nodes, outputs=list(outputs))

    def leaves(self) -> list[Tensor]:
        return [t for t in self.nodes if t.is_leaf]

    def backward(self, output: Tensor) -> dict[int, np.ndarray]:
        if output.value.size != 1:
            raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {}
        if not output.requires_grad:
            return grads
        grads[id(output)] = np.ones_like(output.value)
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node.is_leaf:
                continue
            for parent, contrib in zip(node.parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = np.asarray(contrib, dtype=np.float64)
        return grads


def backward(output: Tensor) -> list[Tensor]:
    """Backpropagate from a scalar ``output``; fills ``.grad`` on leaves.

    Leaves that require grad but are disconnected from the output keep
    ``grad=None``; so do constant leaves.  Returns the leaves that received
    a gradient.
    """
    graph = Graph.trace(output)
    grads = graph.backward(output)
    touched = []
    for leaf in graph.leaves():
        g = grads.get(id(leaf))
        if g is not None:
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            touched.append(leaf)
    return touched


def grad_check(
    fn: Callable[..., Tensor],
    params: Sequence[np.ndarray],
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` receives one Tensor per entry of ``params`` and must return a
    scalar Tensor.  The relative error of each coordinate uses the
    denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    arrays = [np.array(p, dtype=np.float64) for p in params]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    if not np.isfinite(out.value).all():
        raise NonFiniteError("grad_check: function returned non-finite value")
    backward(out)
    analytic = [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, leaves)]

    def evaluate() -> float:
        val = fn(*[Tensor(a) for a in arrays]).value
        if not np.isfinite(val).all():
            raise NonFiniteError("grad_check: function returned non-finite value")
        return float(val)

    worst = 0.0
    for a, ga in zip(arrays, analytic):
        flat = a.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = evaluate()
            flat[i] = orig - step
            fm = evaluate()
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            denom = max(abs(gflat[i]), abs(num), 1e-8)
            worst = max(worst, abs(gflat[i] - num) / denom)
    return worst
