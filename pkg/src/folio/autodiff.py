"""Reverse-mode automatic differentiation over dense vectors and matrices.

Every operation appends a node to a flat :class:`Tape`. A node remembers its
parent indices, a forward function (so the tape can be replayed) and a
backward function producing local partials. :func:`backward` runs a single
reverse sweep from a scalar output and returns a gradient per tape node.

Conventions baked into the op set:

* ``sign`` and the two indicator ops are recorded with zero local partials,
  i.e. they behave as straight-through constants during backprop.
* ``variance`` uses population normalization (divide by n).
* elementwise binary ops follow numpy broadcasting; gradients are
  sum-reduced back to each parent's shape.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DomainError, ShapeError

Array = np.ndarray


def _freeze(data) -> Array:
    """Copy into an immutable float64 array."""
    arr = np.array(data, dtype=float)
    arr.setflags(write=False)
    return arr


class Node:
    """One recorded operation: parents, replayable forward, local backward."""

    __slots__ = ("op", "parents", "forward", "backward")

    def __init__(self, op, parents, forward, backward):
        self.op = op
        self.parents = tuple(parents)
        self.forward = forward
        self.backward = backward


class Tensor:
    """Immutable value living at a fixed index on a tape."""

    __slots__ = ("tape", "index", "data")

    def __init__(self, tape: "Tape", index: int, data: Array):
        self.tape = tape
        self.index = index
        self.data = data

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data)

    def __repr__(self):
        return f"Tensor(idx={self.index}, shape={self.shape})"

    # operator sugar; scalars are lifted to constants on the same tape
    def __add__(self, other):
        return add(self, _lift(self.tape, other))

    def __radd__(self, other):
        return add(_lift(self.tape, other), self)

    def __sub__(self, other):
        return sub(self, _lift(self.tape, other))

    def __rsub__(self, other):
        return sub(_lift(self.tape, other), self)

    def __mul__(self, other):
        return mul(self, _lift(self.tape, other))

    def __rmul__(self, other):
        return mul(_lift(self.tape, other), self)

    def __truediv__(self, other):
        return div(self, _lift(self.tape, other))

    def __rtruediv__(self, other):
        return div(_lift(self.tape, other), self)

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Ordered record of operations; parents always precede children."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.values: list[Array] = []

    def __len__(self):
        return len(self.nodes)

    def _record(self, op, parents, value, forward, backward) -> Tensor:
        value = _freeze(value)
        self.nodes.append(Node(op, [p.index for p in parents], forward, backward))
        self.values.append(value)
        return Tensor(self, len(self.nodes) - 1, value)

    def leaf(self, data) -> Tensor:
        """Register an input tensor (a gradient target)."""
        return self._record("leaf", [], data, None, None)

    def constant(self, data) -> Tensor:
        """Register a constant; identical to a leaf whose gradient is ignored."""
        return self._record("const", [], data, None, None)

    def replay(self) -> list[Array]:
        """Recompute every node's value from the leaves, in recorded order.

        Returns the fresh value list; replaying is bit-identical to the
        original forward pass for identical leaf data.
        """
        out: list[Array] = []
        for node, stored in zip(self.nodes, self.values):
            if not node.parents:
                out.append(stored)
            else:
                out.append(node.forward([out[p] for p in node.parents]))
        return out


def _lift(tape: Tape, x) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ContractError("operands recorded on different tapes")
        return x
    return tape.constant(x)


def _same_tape(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ContractError("operands recorded on different tapes")
    return tape


def _unbroadcast(grad: Array, shape) -> Array:
    """Sum-reduce a broadcast gradient back to the parent shape."""
    g = grad
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op, a: Tensor, b: Tensor):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, [a.shape, b.shape]) from None


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    _broadcast_shape("add", a, b)
    fwd = lambda p: p[0] + p[1]
    bwd = lambda g, v, p: (_unbroadcast(g, p[0].shape), _unbroadcast(g, p[1].shape))
    return tape._record("add", [a, b], a.data + b.data, fwd, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    _broadcast_shape("sub", a, b)
    fwd = lambda p: p[0] - p[1]
    bwd = lambda g, v, p: (_unbroadcast(g, p[0].shape), _unbroadcast(-g, p[1].shape))
    return tape._record("sub", [a, b], a.data - b.data, fwd, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    _broadcast_shape("mul", a, b)
    fwd = lambda p: p[0] * p[1]
    bwd = lambda g, v, p: (
        _unbroadcast(g * p[1], p[0].shape),
        _unbroadcast(g * p[0], p[1].shape),
    )
    return tape._record("mul", [a, b], a.data * b.data, fwd, bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")
    fwd = lambda p: p[0] / p[1]
    bwd = lambda g, v, p: (
        _unbroadcast(g / p[1], p[0].shape),
        _unbroadcast(-g * p[0] / (p[1] * p[1]), p[1].shape),
    )
    return tape._record("div", [a, b], a.data / b.data, fwd, bwd)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first input."""
    tape = _same_tape(a, b)
    _broadcast_shape("max", a, b)
    fwd = lambda p: np.maximum(p[0], p[1])

    def bwd(g, v, p):
        take_a = p[0] >= p[1]
        return (
            _unbroadcast(g * take_a, p[0].shape),
            _unbroadcast(g * ~take_a, p[1].shape),
        )

    return tape._record("max", [a, b], np.maximum(a.data, b.data), fwd, bwd)


def indicator_greater(x: Tensor, threshold) -> Tensor:
    """1 where x > threshold else 0. Zero local partials (straight-through)."""
    tape = x.tape
    t = _lift(tape, threshold)
    _broadcast_shape("indicator_greater", x, t)
    fwd = lambda p: (p[0] > p[1]).astype(float)
    bwd = lambda g, v, p: (None, None)
    return tape._record(
        "indicator_greater", [x, t], (x.data > t.data).astype(float), fwd, bwd
    )


def indicator_less(x: Tensor, threshold) -> Tensor:
    """1 where x < threshold else 0. Zero local partials (straight-through)."""
    tape = x.tape
    t = _lift(tape, threshold)
    _broadcast_shape("indicator_less", x, t)
    fwd = lambda p: (p[0] < p[1]).astype(float)
    bwd = lambda g, v, p: (None, None)
    return tape._record(
        "indicator_less", [x, t], (x.data < t.data).astype(float), fwd, bwd
    )


# ---------------------------------------------------------------------------
# matrix ops


def matvec(m: Tensor, v: Tensor) -> Tensor:
    tape = _same_tape(m, v)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError("matvec", [m.shape, v.shape], "expects (m,n) @ (n,)")
    fwd = lambda p: p[0] @ p[1]
    bwd = lambda g, v_, p: (np.outer(g, p[1]), p[0].T @ g)
    return tape._record("matvec", [m, v], m.data @ v.data, fwd, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", [a.shape, b.shape], "expects (m,k) @ (k,n)")
    fwd = lambda p: p[0] @ p[1]
    bwd = lambda g, v, p: (g @ p[1].T, p[0].T @ g)
    return tape._record("matmul", [a, b], a.data @ b.data, fwd, bwd)


# ---------------------------------------------------------------------------
# elementwise unary ops


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="raise"):
        try:
            value = np.exp(x.data)
        except FloatingPointError:
            raise DomainError("exp: overflow (input too large)") from None
    fwd = lambda p: np.exp(p[0])
    bwd = lambda g, v, p: (g * v,)
    return x.tape._record("exp", [x], value, fwd, bwd)


def abs_(x: Tensor) -> Tensor:
    """|x|; subgradient sign(x), with sign(0) = 0."""
    fwd = lambda p: np.abs(p[0])
    bwd = lambda g, v, p: (g * np.sign(p[0]),)
    return x.tape._record("abs", [x], np.abs(x.data), fwd, bwd)


def sign(x: Tensor) -> Tensor:
    """sign(x) with sign(0) = 0; zero local partials (straight-through)."""
    fwd = lambda p: np.sign(p[0])
    bwd = lambda g, v, p: (None,)
    return x.tape._record("sign", [x], np.sign(x.data), fwd, bwd)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0.0):
        raise DomainError("sqrt: negative input")
    fwd = lambda p: np.sqrt(p[0])
    bwd = lambda g, v, p: (g * 0.5 / np.sqrt(p[0]),)
    return x.tape._record("sqrt", [x], np.sqrt(x.data), fwd, bwd)


def _stable_sigmoid(x: Array) -> Array:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_shifted(x: Tensor, a: float) -> Tensor:
    """Generalized sigmoid a + 1/(1+e^{-x}), a >= 0; degenerates to the
    plain sigmoid at a = 0."""
    if a < 0:
        raise ContractError(f"sigmoid_shifted requires a >= 0, got {a}")
    fwd = lambda p: a + _stable_sigmoid(p[0])

    def bwd(g, v, p):
        s = v - a
        return (g * s * (1.0 - s),)

    return x.tape._record(
        "sigmoid_shifted", [x], a + _stable_sigmoid(x.data), fwd, bwd
    )


def tanh(x: Tensor) -> Tensor:
    fwd = lambda p: np.tanh(p[0])
    bwd = lambda g, v, p: (g * (1.0 - v * v),)
    return x.tape._record("tanh", [x], np.tanh(x.data), fwd, bwd)


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis (rowwise for matrices), max-stabilized."""

    def _fwd(p):
        z = p[0] - p[0].max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def bwd(g, v, p):
        inner = (g * v).sum(axis=-1, keepdims=True)
        return (v * (g - inner),)

    return x.tape._record("softmax", [x], _fwd([x.data]), _fwd, bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    fwd = lambda p: c * p[0]
    bwd = lambda g, v, p: (c * g,)
    return x.tape._record("scale", [x], c * x.data, fwd, bwd)


# ---------------------------------------------------------------------------
# reductions


def sum_(x: Tensor) -> Tensor:
    fwd = lambda p: np.asarray(p[0].sum())
    bwd = lambda g, v, p: (np.broadcast_to(g, p[0].shape).copy(),)
    return x.tape._record("sum", [x], np.asarray(x.data.sum()), fwd, bwd)


def mean_(x: Tensor) -> Tensor:
    fwd = lambda p: np.asarray(p[0].mean())

    def bwd(g, v, p):
        return (np.broadcast_to(g / p[0].size, p[0].shape).copy(),)

    return x.tape._record("mean", [x], np.asarray(x.data.mean()), fwd, bwd)


def variance(x: Tensor) -> Tensor:
    """Population variance (divide by n) over all elements."""
    fwd = lambda p: np.asarray(p[0].var())

    def bwd(g, v, p):
        n = p[0].size
        return (g * 2.0 * (p[0] - p[0].mean()) / n,)

    return x.tape._record("variance", [x], np.asarray(x.data.var()), fwd, bwd)


# ---------------------------------------------------------------------------
# structural ops (shape plumbing, gradient-exact)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError("reshape", [x.shape, shape], "element count must match")
    fwd = lambda p: p[0].reshape(shape)
    bwd = lambda g, v, p: (g.reshape(p[0].shape),)
    return x.tape._record("reshape", [x], x.data.reshape(shape), fwd, bwd)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    if not tensors:
        raise ContractError("stack of zero tensors")
    tape = _same_tape(*tensors)
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError("stack", [shape, t.shape])
    fwd = lambda p: np.stack(p)
    bwd = lambda g, v, p: tuple(g[i] for i in range(len(p)))
    return tape._record("stack", list(tensors), np.stack([t.data for t in tensors]), fwd, bwd)


def segment(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous 1-D slice x[start:stop]; gradient scatters back."""
    if x.ndim != 1:
        raise ShapeError("segment", [x.shape], "expects a 1-D tensor")
    if not (0 <= start <= stop <= x.shape[0]):
        raise ContractError(f"segment bounds [{start}, {stop}) outside length {x.shape[0]}")
    fwd = lambda p: p[0][start:stop]

    def bwd(g, v, p):
        full = np.zeros_like(p[0])
        full[start:stop] = g
        return (full,)

    return x.tape._record("segment", [x], x.data[start:stop], fwd, bwd)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Convenience inner product: sum(a * b)."""
    return sum_(mul(a, b))


# ---------------------------------------------------------------------------
# generic dispatch, backward sweep, finite-difference checking

_OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matvec": matvec,
    "matmul": matmul,
    "exp": exp,
    "abs": abs_,
    "sign": sign,
    "sqrt": sqrt,
    "sigmoid_shifted": sigmoid_shifted,
    "tanh": tanh,
    "softmax": softmax,
    "sum": sum_,
    "mean": mean_,
    "variance": variance,
    "max": maximum,
    "max-elementwise": maximum,
    "indicator_greater": indicator_greater,
    "indicator-greater": indicator_greater,
    "indicator_less": indicator_less,
    "indicator-less": indicator_less,
    "scale": scale,
    "scalar-scale": scale,
    "reshape": reshape,
    "stack": stack,
    "segment": segment,
}


def forward_op(op: str, *inputs, **params) -> Tensor:
    """Apply a named op to tensors, recording it on their tape."""
    try:
        fn = _OPS[op]
    except KeyError:
        raise ContractError(f"unknown op '{op}'") from None
    return fn(*inputs, **params)


class GradientMap:
    """Result of a backward sweep: one gradient per tape node."""

    def __init__(self, tape: Tape, grads: list[Optional[Array]]):
        self._tape = tape
        self._grads = grads

    def wrt(self, t: Tensor) -> Array:
        """Gradient of the swept output with respect to ``t``.

        Nodes disconnected from the output get an exact zero gradient.
        """
        if t.tape is not self._tape:
            raise ContractError("tensor does not belong to the swept tape")
        g = self._grads[t.index]
        if g is None:
            return np.zeros(t.shape)
        return g

    __getitem__ = wrt


def backward(tape: Tape, output: Tensor) -> GradientMap:
    """Reverse sweep from a scalar output node."""
    if output.tape is not tape:
        raise ContractError("output tensor is not on this tape")
    if output.size != 1:
        raise ContractError(f"backward requires a scalar output, got shape {output.shape}")
    grads: list[Optional[Array]] = [None] * len(tape)
    grads[output.index] = np.ones_like(output.data)
    for idx in range(output.index, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        node = tape.nodes[idx]
        if not node.parents:
            continue
        parent_vals = [tape.values[p] for p in node.parents]
        local = node.backward(g, tape.values[idx], parent_vals)
        for parent, pg in zip(node.parents, local):
            if pg is None:
                continue
            if grads[parent] is None:
                grads[parent] = np.zeros_like(tape.values[parent])
            grads[parent] = grads[parent] + pg
    return GradientMap(tape, grads)


def _value_of(f: Callable[[Tensor], Tensor], x: Array) -> float:
    tape = Tape()
    out = f(tape.leaf(x))
    if out.size != 1:
        raise ContractError("grad_check expects a scalar-valued function")
    return float(out.data)


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-5,
    mask=None,
) -> float:
    """Max relative disagreement between analytic and central-difference grads.

    ``mask`` (optional boolean array) restricts the finite-difference probe
    to continuous coordinates, e.g. to skip perturbations across a sign
    discontinuity. Returns
    max_i |analytic_i - central_i| / max(|analytic_i|, |central_i|, 1e-8).
    """
    if eps <= 0:
        raise ContractError("grad_check requires eps > 0")
    x = np.array(x, dtype=float)
    tape = Tape()
    leaf = tape.leaf(x)
    out = f(leaf)
    if out.size != 1:
        raise ContractError("grad_check expects a scalar-valued function")
    analytic = backward(tape, out).wrt(leaf)
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
    worst = 0.0
    for idx in np.ndindex(*x.shape):
        if not mask[idx]:
            continue
        hi = x.copy()
        hi[idx] += eps
        lo = x.copy()
        lo[idx] -= eps
        central = (_value_of(f, hi) - _value_of(f, lo)) / (2.0 * eps)
        a = float(analytic[idx])
        err = abs(a - central) / max(abs(a), abs(central), 1e-8)
        worst = max(worst, err)
    return worst
