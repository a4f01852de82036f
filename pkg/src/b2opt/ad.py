"""Dense-array reverse-mode automatic differentiation.

A :class:`Tape` records every operation applied to its nodes in execution
order, so the reverse sweep is a plain walk over the node list backwards.
Values are float64 numpy arrays; leading batch axes broadcast the way numpy
does, which lets a whole minibatch of populations share one tape.

Every op in this module also accepts plain arrays. When none of the inputs
is a :class:`Node` the op just returns the numpy result, so the same
expression code serves both the metered inference path and the training path.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str, node_id: int | None):
        where = f"node {node_id}" if node_id is not None else "untracked value"
        super().__init__(f"non-finite value produced by {op!r} at {where}")
        self.op = op
        self.node_id = node_id


class Parameter:
    """A named trainable array with a gradient buffer of the same shape."""

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Node:
    __slots__ = ("tape", "id", "value", "parents", "backward_fn", "requires_grad", "op", "grad")

    __array_ufunc__ = None  # ndarray (op) Node defers to the reflected Node method

    def __init__(self, tape, value, parents=(), backward_fn=None, requires_grad=False, op="leaf"):
        self.tape = tape
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op
        self.grad = None
        self.id = tape._append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def T(self) -> "Node":
        return transpose(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"


class Tape:
    """Append-only record of operations; rebuilt for every training step."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.check_finite = check_finite
        self._param_nodes: dict[int, tuple[Parameter, Node]] = {}

    def _append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def const(self, value) -> Node:
        return Node(self, np.asarray(value, dtype=np.float64))

    def var(self, value) -> Node:
        """A differentiable leaf not tied to a Parameter (its ``grad`` is set by backward)."""
        return Node(self, np.array(value, dtype=np.float64), requires_grad=True)

    def param(self, p: Parameter) -> Node:
        hit = self._param_nodes.get(id(p))
        if hit is not None:
            return hit[1]
        node = Node(self, p.value, requires_grad=True, op=f"param:{p.name}")
        self._param_nodes[id(p)] = (p, node)
        return node

    def backward(self, loss: Node) -> None:
        if loss.tape is not self:
            raise ValueError("loss node belongs to a different tape")
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.id] = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads[node.id]
            if g is None:
                continue
            if node.backward_fn is None:
                node.grad = g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.value.shape)
                if grads[parent.id] is None:
                    grads[parent.id] = pg
                else:
                    grads[parent.id] = grads[parent.id] + pg
        for p, node in self._param_nodes.values():
            g = grads[node.id]
            if g is not None:
                p.grad = p.grad + g

    def release(self) -> None:
        """Drop recorded nodes so their buffers are freed without waiting for the cycle collector."""
        for node in self.nodes:
            node.parents = ()
            node.backward_fn = None
        self.nodes.clear()
        self._param_nodes.clear()


# ---------------------------------------------------------------------------
# helpers


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


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


def _tape_of(inputs) -> Tape | None:
    tape = None
    for x in inputs:
        if isinstance(x, Node):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands live on different tapes")
    return tape


def _broadcast_shapes(op: str, *shapes) -> None:
    try:
        np.broadcast_shapes(*shapes)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {' and '.join(map(str, shapes))}") from None


def _apply(op: str, inputs: Sequence, forward: Callable, backward: Callable | None):
    """Run ``forward`` on input values; record a node when any input is tracked.

    ``backward(g, out, *vals)`` returns one gradient (or None) per input.
    """
    vals = [value_of(x) for x in inputs]
    with np.errstate(all="ignore"):  # non-finite results are reported below
        out = forward(*vals)
    tape = _tape_of(inputs)
    if tape is None:
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(op, None)
        return out
    parents = [x if isinstance(x, Node) else tape.const(v) for x, v in zip(inputs, vals)]
    requires = backward is not None and any(p.requires_grad for p in parents)
    bfn = (lambda g: backward(g, out, *vals)) if requires else None
    node = Node(tape, out, parents, bfn, requires, op)
    if tape.check_finite and not np.all(np.isfinite(out)):
        raise NonFiniteError(op, node.id)
    return node


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    _broadcast_shapes("add", np.shape(value_of(a)), np.shape(value_of(b)))
    return _apply("add", (a, b), np.add, lambda g, out, x, y: (g, g))


def sub(a, b):
    _broadcast_shapes("sub", np.shape(value_of(a)), np.shape(value_of(b)))
    return _apply("sub", (a, b), np.subtract, lambda g, out, x, y: (g, -g))


def mul(a, b):
    _broadcast_shapes("mul", np.shape(value_of(a)), np.shape(value_of(b)))
    return _apply("mul", (a, b), np.multiply, lambda g, out, x, y: (g * y, g * x))


def div(a, b):
    _broadcast_shapes("div", np.shape(value_of(a)), np.shape(value_of(b)))
    return _apply("div", (a, b), np.divide, lambda g, out, x, y: (g / y, -g * x / (y * y)))


def neg(a):
    return _apply("neg", (a,), np.negative, lambda g, out, x: (-g,))


def square(a):
    return _apply("square", (a,), lambda x: x * x, lambda g, out, x: (2.0 * x * g,))


def relu(a):
    return _apply("relu", (a,), lambda x: np.maximum(x, 0.0), lambda g, out, x: (g * (x > 0),))


def abs_(a):
    # np.sign is 0 at 0: the subgradient convention for kinks
    return _apply("abs", (a,), np.abs, lambda g, out, x: (g * np.sign(x),))


def sin(a):
    return _apply("sin", (a,), np.sin, lambda g, out, x: (g * np.cos(x),))


def cos(a):
    return _apply("cos", (a,), np.cos, lambda g, out, x: (-g * np.sin(x),))


def exp(a):
    return _apply("exp", (a,), np.exp, lambda g, out, x: (g * out,))


def sqrt(a):
    def back(g, out, x):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return _apply("sqrt", (a,), np.sqrt, back)


def clip(a, lower, upper):
    """Clamp to ``[lower, upper]``; gradient passes for values already inside."""
    lo = np.asarray(lower, dtype=np.float64)
    hi = np.asarray(upper, dtype=np.float64)

    def back(g, out, x):
        return (g * ((x >= lo) & (x <= hi)),)

    return _apply("clip", (a,), lambda x: np.clip(x, lo, hi), back)


def stop_gradient(a):
    """Forward identity; the backward sweep treats the result as a constant."""
    if not isinstance(a, Node):
        return value_of(a)
    return Node(a.tape, a.value, op="stop_gradient")


# ---------------------------------------------------------------------------
# matrix ops


def matmul(a, b):
    sa, sb = np.shape(value_of(a)), np.shape(value_of(b))
    if len(sa) < 2 or len(sb) < 2 or sa[-1] != sb[-2]:
        raise DimensionError(f"matmul: incompatible shapes {sa} and {sb}")
    _broadcast_shapes("matmul", sa[:-2], sb[:-2])

    def back(g, out, x, y):
        return g @ np.swapaxes(y, -1, -2), np.swapaxes(x, -1, -2) @ g

    return _apply("matmul", (a, b), np.matmul, back)


def transpose(a):
    return _apply(
        "transpose", (a,), lambda x: np.swapaxes(x, -1, -2), lambda g, out, x: (np.swapaxes(g, -1, -2),)
    )


def tile(col, cols: int):
    """Repeat an ``(..., n, 1)`` column (or an ``n`` vector) across ``cols`` columns."""
    v = value_of(col)
    if v.ndim == 1:
        col = reshape(col, (v.shape[0], 1))
    elif v.shape[-1] != 1:
        raise DimensionError(f"tile: expected a column vector, got shape {v.shape}")
    return _apply(
        "tile",
        (col,),
        lambda x: np.repeat(x, cols, axis=-1),
        lambda g, out, x: (g.sum(axis=-1, keepdims=True),),
    )


def reshape(a, shape):
    shape = tuple(shape)
    return _apply("reshape", (a,), lambda x: x.reshape(shape), lambda g, out, x: (g.reshape(x.shape),))


def slice_cols(a, start: int | None, stop: int | None):
    sl = slice(start, stop)

    def back(g, out, x):
        full = np.zeros_like(x)
        full[..., sl] = g
        return (full,)

    return _apply("slice_cols", (a,), lambda x: x[..., sl].copy(), back)


def softmax_rows(a):
    def fwd(x):
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def back(g, out, x):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _apply("softmax_rows", (a,), fwd, back)


# ---------------------------------------------------------------------------
# reductions over the last axis; sums run strictly left to right


def _seq_sum(x: np.ndarray) -> np.ndarray:
    return np.cumsum(x, axis=-1)[..., -1]


def sum_last(a):
    return _apply(
        "sum_last", (a,), _seq_sum, lambda g, out, x: (np.broadcast_to(g[..., None], x.shape),)
    )


def mean_last(a):
    n = np.shape(value_of(a))[-1]
    return div(sum_last(a), float(n))


def prod_last(a):
    def back(g, out, x):
        # product of all other entries, without dividing by x
        left = np.concatenate([np.ones_like(x[..., :1]), np.cumprod(x, axis=-1)[..., :-1]], axis=-1)
        rev = np.cumprod(x[..., ::-1], axis=-1)[..., ::-1]
        right = np.concatenate([rev[..., 1:], np.ones_like(x[..., :1])], axis=-1)
        return (g[..., None] * left * right,)

    return _apply("prod_last", (a,), lambda x: np.cumprod(x, axis=-1)[..., -1], back)


def max_last(a):
    """Max over the last axis; the gradient goes to the first maximiser."""

    def back(g, out, x):
        idx = np.argmax(x, axis=-1)[..., None]
        full = np.zeros_like(x)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return _apply("max_last", (a,), lambda x: np.max(x, axis=-1), back)


def min_last(a):
    return neg(max_last(neg(a)))


def total(a):
    """Sum of every entry, as a 0-d value."""
    return _apply(
        "total", (a,), lambda x: _seq_sum(x.reshape(-1)), lambda g, out, x: (np.broadcast_to(g, x.shape),)
    )


def mean(a):
    """Scalar mean of every entry."""
    return div(total(a), float(np.size(value_of(a))))


def permute(a, perm, axis: int = -1):
    """Gather along ``axis`` with a constant index array (one permutation per batch row).

    ``perm`` has the shape of ``a`` with every axis after ``axis`` dropped.
    Indices carry no gradient; values move with their gradients.
    """
    perm = np.asarray(perm)
    x0 = value_of(a)
    ax = axis % x0.ndim
    idx = perm.reshape(perm.shape + (1,) * (x0.ndim - ax - 1))
    inv = np.argsort(perm, axis=-1, kind="stable")
    inv_idx = inv.reshape(idx.shape)

    def fwd(x):
        return np.take_along_axis(x, np.broadcast_to(idx, x.shape), axis=ax)

    def back(g, out, x):
        return (np.take_along_axis(g, np.broadcast_to(inv_idx, g.shape), axis=ax),)

    return _apply("permute", (a,), fwd, back)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(builder: Callable[[Tape], Node], params: Sequence[Parameter], eps: float = 1e-5) -> float:
    """Max relative error of tape gradients against central differences.

    ``builder(tape)`` must rebuild the scalar loss from the current parameter
    values. The error per entry is ``|analytic - fd| / max(1, |fd|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        p.zero_grad()
    tape = Tape()
    loss = builder(tape)
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    def f() -> float:
        return float(value_of(builder(Tape())))

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f()
            flat[i] = orig - eps
            down = f()
            flat[i] = orig
            fd = (up - down) / (2 * eps)
            worst = max(worst, abs(gflat[i] - fd) / max(1.0, abs(fd)))
    return worst
