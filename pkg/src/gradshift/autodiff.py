"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tape records primitive operations as an append-only list of Nodes (a
Wengert list). backward() walks the tape in reverse accumulating
vector-Jacobian products, so gradients can be read at any recorded node,
including named marks on intermediate activations. Tapes are single-writer;
distinct tapes can be built and differentiated concurrently.
"""

from __future__ import annotations

import numpy as np

SUPPORTED_OPS = (
    "add", "sub", "mul", "matmul", "affine", "relu", "tanh", "exp", "log",
    "softplus", "softmax", "logsumexp", "sum", "mean", "square", "concat",
    "slice", "reshape",
)


class ShapeMismatch(ValueError):
    """Operand shapes are invalid for a primitive op."""


class NonScalarRoot(ValueError):
    """backward() was called on a non-scalar node."""


class UnknownMark(KeyError):
    """A gradient was requested at a mark that was never set."""


def tensor(data, shape=None) -> np.ndarray:
    """Convert input data to a float64 array, rejecting NaN/Inf entries."""
    arr = np.array(data, dtype=np.float64, copy=True)
    if shape is not None:
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor data must be finite (no NaN/Inf)")
    return arr


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # overflow-safe logistic, split by sign
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    grad = np.asarray(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _softmax_last(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class Node:
    """One recorded value in a tape: payload plus local-gradient recipes."""

    __slots__ = ("id", "op", "value", "parents", "requires_grad")

    def __init__(self, node_id, op, value, parents, requires_grad):
        self.id = node_id
        self.op = op
        self.value = value
        # parents: tuple of (Node, vjp) where vjp maps the output gradient
        # to this parent's gradient contribution
        self.parents = parents
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"


class Tape:
    """Append-only computation record supporting reverse-mode gradients."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.marks: dict[str, Node] = {}
        self._cached_root: int | None = None
        self._cached_grads: dict[int, np.ndarray] | None = None

    # ------------------------------------------------------------------
    # construction
    # ------------------------------------------------------------------

    def leaf(self, value, requires_grad: bool = False) -> Node:
        """Record an input tensor. Finiteness is enforced here, not in ops."""
        return self._append("leaf", tensor(value), (), requires_grad)

    def const(self, value) -> Node:
        return self.leaf(value, requires_grad=False)

    def _append(self, op, value, parents, requires_grad) -> Node:
        node = Node(len(self.nodes), op, np.asarray(value, dtype=np.float64),
                    tuple(parents), requires_grad)
        self.nodes.append(node)
        self._cached_root = None
        self._cached_grads = None
        return node

    def mark(self, name: str, node: Node) -> Node:
        """Attach a named handle to a recorded intermediate."""
        if not isinstance(node, Node) or self.nodes[node.id] is not node:
            raise ValueError(f"mark {name!r}: node does not belong to this tape")
        self.marks[name] = node
        return node

    # ------------------------------------------------------------------
    # primitive dispatch
    # ------------------------------------------------------------------

    def record(self, op: str, inputs: list[Node], **attrs) -> Node:
        """Record one primitive op over already-recorded input nodes."""
        if op not in SUPPORTED_OPS:
            raise ValueError(f"unsupported op {op!r}")
        for node in inputs:
            if not isinstance(node, Node):
                raise TypeError(f"{op}: inputs must be Nodes, got {type(node)}")
        method = getattr(self, "_op_" + op)
        return method(inputs, attrs)

    def _binary_shapes(self, op, a, b):
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeMismatch(
                f"{op}: cannot broadcast {a.shape} with {b.shape}") from None

    def _op_add(self, inputs, attrs):
        a, b = inputs
        self._binary_shapes("add", a, b)
        rg = a.requires_grad or b.requires_grad
        return self._append("add", a.value + b.value, (
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(g, b.shape)),
        ), rg)

    def _op_sub(self, inputs, attrs):
        a, b = inputs
        self._binary_shapes("sub", a, b)
        rg = a.requires_grad or b.requires_grad
        return self._append("sub", a.value - b.value, (
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(-g, b.shape)),
        ), rg)

    def _op_mul(self, inputs, attrs):
        a, b = inputs
        self._binary_shapes("mul", a, b)
        av, bv = a.value, b.value
        rg = a.requires_grad or b.requires_grad
        return self._append("mul", av * bv, (
            (a, lambda g: _unbroadcast(g * bv, a.shape)),
            (b, lambda g: _unbroadcast(g * av, b.shape)),
        ), rg)

    def _op_matmul(self, inputs, attrs):
        a, b = inputs
        ta = bool(attrs.get("transpose_a", False))
        tb = bool(attrs.get("transpose_b", False))
        if a.value.ndim < 2 or b.value.ndim < 2:
            raise ShapeMismatch(
                f"matmul: operands must be >= 2-D, got {a.shape} and {b.shape}")
        aeff = np.swapaxes(a.value, -1, -2) if ta else a.value
        beff = np.swapaxes(b.value, -1, -2) if tb else b.value
        if aeff.shape[-1] != beff.shape[-2]:
            raise ShapeMismatch(
                f"matmul: inner dims disagree for {a.shape} x {b.shape} "
                f"(transpose_a={ta}, transpose_b={tb})")
        try:
            value = np.matmul(aeff, beff)
        except ValueError:
            raise ShapeMismatch(
                f"matmul: batch dims disagree for {a.shape} x {b.shape}") from None

        def grad_a(g):
            ga = np.matmul(g, np.swapaxes(beff, -1, -2))
            if ta:
                ga = np.swapaxes(ga, -1, -2)
            return _unbroadcast(ga, a.shape)

        def grad_b(g):
            gb = np.matmul(np.swapaxes(aeff, -1, -2), g)
            if tb:
                gb = np.swapaxes(gb, -1, -2)
            return _unbroadcast(gb, b.shape)

        rg = a.requires_grad or b.requires_grad
        return self._append("matmul", value, ((a, grad_a), (b, grad_b)), rg)

    def _op_affine(self, inputs, attrs):
        x, w, b = inputs
        if w.value.ndim != 2 or b.value.ndim != 1:
            raise ShapeMismatch(
                f"affine: weight must be 2-D and bias 1-D, got {w.shape}, {b.shape}")
        n_in, n_out = w.value.shape
        if x.value.ndim < 1 or x.value.shape[-1] != n_in or b.value.shape[0] != n_out:
            raise ShapeMismatch(
                f"affine: incompatible shapes x={x.shape} w={w.shape} b={b.shape}")
        xv, wv = x.value, w.value
        value = xv @ wv + b.value

        def grad_x(g):
            return g @ wv.T

        def grad_w(g):
            xm = xv.reshape(-1, n_in)
            gm = np.asarray(g).reshape(-1, n_out)
            return xm.T @ gm

        def grad_b(g):
            return np.asarray(g).reshape(-1, n_out).sum(axis=0)

        rg = x.requires_grad or w.requires_grad or b.requires_grad
        return self._append("affine", value,
                            ((x, grad_x), (w, grad_w), (b, grad_b)), rg)

    def _op_relu(self, inputs, attrs):
        (x,) = inputs
        gate = (x.value > 0).astype(np.float64)
        return self._append("relu", np.maximum(x.value, 0.0),
                            ((x, lambda g: g * gate),), x.requires_grad)

    def _op_tanh(self, inputs, attrs):
        (x,) = inputs
        t = np.tanh(x.value)
        return self._append("tanh", t,
                            ((x, lambda g: g * (1.0 - t * t)),), x.requires_grad)

    def _op_exp(self, inputs, attrs):
        (x,) = inputs
        e = np.exp(x.value)
        return self._append("exp", e, ((x, lambda g: g * e),), x.requires_grad)

    def _op_log(self, inputs, attrs):
        (x,) = inputs
        xv = x.value
        return self._append("log", np.log(xv),
                            ((x, lambda g: g / xv),), x.requires_grad)

    def _op_softplus(self, inputs, attrs):
        (x,) = inputs
        xv = x.value
        return self._append("softplus", np.logaddexp(0.0, xv),
                            ((x, lambda g: g * _sigmoid(xv)),), x.requires_grad)

    def _op_square(self, inputs, attrs):
        (x,) = inputs
        xv = x.value
        return self._append("square", xv * xv,
                            ((x, lambda g: 2.0 * xv * g),), x.requires_grad)

    def _op_softmax(self, inputs, attrs):
        # over the last axis, with max subtraction for stability
        (x,) = inputs
        s = _softmax_last(x.value)

        def vjp(g):
            inner = (g * s).sum(axis=-1, keepdims=True)
            return s * (g - inner)

        return self._append("softmax", s, ((x, vjp),), x.requires_grad)

    def _op_logsumexp(self, inputs, attrs):
        # over the last axis, with max subtraction for stability
        (x,) = inputs
        keepdims = bool(attrs.get("keepdims", False))
        m = x.value.max(axis=-1, keepdims=True)
        value = m + np.log(np.exp(x.value - m).sum(axis=-1, keepdims=True))
        if not keepdims:
            value = value.squeeze(-1)
        s = _softmax_last(x.value)

        def vjp(g):
            g = np.asarray(g)
            if not keepdims:
                g = np.expand_dims(g, -1)
            return s * g

        return self._append("logsumexp", value, ((x, vjp),), x.requires_grad)

    @staticmethod
    def _norm_axes(axis, ndim):
        if axis is None:
            return tuple(range(ndim))
        if isinstance(axis, int):
            axis = (axis,)
        return tuple(sorted(a % ndim for a in axis))

    def _reduce(self, op, inputs, attrs):
        (x,) = inputs
        axes = self._norm_axes(attrs.get("axis"), x.value.ndim)
        value = x.value.sum(axis=axes)
        count = 1
        for a in axes:
            count *= x.value.shape[a]
        if op == "mean":
            value = value / count
        scale = 1.0 / count if op == "mean" else 1.0
        xshape = x.shape

        def vjp(g):
            g = np.asarray(g)
            for a in axes:
                g = np.expand_dims(g, a)
            return np.broadcast_to(g * scale, xshape).copy()

        return self._append(op, value, ((x, vjp),), x.requires_grad)

    def _op_sum(self, inputs, attrs):
        return self._reduce("sum", inputs, attrs)

    def _op_mean(self, inputs, attrs):
        return self._reduce("mean", inputs, attrs)

    def _op_concat(self, inputs, attrs):
        axis = attrs.get("axis", -1)
        shapes = [n.value.shape for n in inputs]
        base = list(shapes[0])
        ax = axis % len(base)
        for s in shapes[1:]:
            trimmed = list(s)
            if len(trimmed) != len(base):
                raise ShapeMismatch(f"concat: rank mismatch among {shapes}")
            trimmed[ax] = base[ax]
            if trimmed != base:
                raise ShapeMismatch(f"concat: incompatible shapes {shapes}")
        value = np.concatenate([n.value for n in inputs], axis=ax)
        offsets = np.cumsum([0] + [s[ax] for s in shapes])
        parents = []
        for i, node in enumerate(inputs):
            lo, hi = offsets[i], offsets[i + 1]

            def vjp(g, lo=lo, hi=hi):
                slicer = [slice(None)] * g.ndim
                slicer[ax] = slice(lo, hi)
                return np.asarray(g)[tuple(slicer)]

            parents.append((node, vjp))
        rg = any(n.requires_grad for n in inputs)
        return self._append("concat", value, tuple(parents), rg)

    def _op_slice(self, inputs, attrs):
        (x,) = inputs
        start, stop = attrs["start"], attrs["stop"]
        axis = attrs.get("axis", -1) % x.value.ndim
        dim = x.value.shape[axis]
        if not (0 <= start <= stop <= dim):
            raise ShapeMismatch(
                f"slice: range [{start}, {stop}) invalid for axis {axis} of {x.shape}")
        slicer = [slice(None)] * x.value.ndim
        slicer[axis] = slice(start, stop)
        slicer = tuple(slicer)
        xshape = x.shape

        def vjp(g):
            out = np.zeros(xshape)
            out[slicer] = g
            return out

        return self._append("slice", x.value[slicer], ((x, vjp),),
                            x.requires_grad)

    def _op_reshape(self, inputs, attrs):
        (x,) = inputs
        shape = tuple(attrs["shape"])
        try:
            value = x.value.reshape(shape)
        except ValueError:
            raise ShapeMismatch(
                f"reshape: cannot reshape {x.shape} to {shape}") from None
        xshape = x.shape
        return self._append("reshape", value,
                            ((x, lambda g: np.asarray(g).reshape(xshape)),),
                            x.requires_grad)

    # ------------------------------------------------------------------
    # convenience wrappers
    # ------------------------------------------------------------------

    def add(self, a, b):
        return self.record("add", [a, b])

    def sub(self, a, b):
        return self.record("sub", [a, b])

    def mul(self, a, b):
        return self.record("mul", [a, b])

    def matmul(self, a, b, transpose_a=False, transpose_b=False):
        return self.record("matmul", [a, b],
                           transpose_a=transpose_a, transpose_b=transpose_b)

    def affine(self, x, w, b):
        return self.record("affine", [x, w, b])

    def relu(self, x):
        return self.record("relu", [x])

    def tanh(self, x):
        return self.record("tanh", [x])

    def exp(self, x):
        return self.record("exp", [x])

    def log(self, x):
        return self.record("log", [x])

    def softplus(self, x):
        return self.record("softplus", [x])

    def square(self, x):
        return self.record("square", [x])

    def softmax(self, x):
        return self.record("softmax", [x])

    def logsumexp(self, x, keepdims=False):
        return self.record("logsumexp", [x], keepdims=keepdims)

    def sum(self, x, axis=None):
        return self.record("sum", [x], axis=axis)

    def mean(self, x, axis=None):
        return self.record("mean", [x], axis=axis)

    def concat(self, nodes, axis=-1):
        return self.record("concat", list(nodes), axis=axis)

    def slice(self, x, start, stop, axis=-1):
        return self.record("slice", [x], start=start, stop=stop, axis=axis)

    def reshape(self, x, shape):
        return self.record("reshape", [x], shape=shape)

    def scale(self, x, factor: float):
        """Multiply by a recorded scalar constant."""
        return self.mul(x, self.const(factor))

    def add_const(self, x, offset: float):
        return self.add(x, self.const(offset))

    # ------------------------------------------------------------------
    # differentiation
    # ------------------------------------------------------------------

    def backward(self, root: Node) -> dict[int, np.ndarray]:
        """Accumulate d(root)/d(node) for every node reachable from root.

        Returns a map node id -> gradient array (same shape as the node's
        value). Results are cached until the tape grows again.
        """
        if self.nodes[root.id] is not root:
            raise ValueError("root does not belong to this tape")
        if root.value.shape != ():
            raise NonScalarRoot(
                f"backward root must be scalar, got shape {root.value.shape}")
        if self._cached_root == root.id and self._cached_grads is not None:
            return self._cached_grads
        grads: dict[int, np.ndarray] = {root.id: np.ones(())}
        for node in reversed(self.nodes[: root.id + 1]):
            g = grads.get(node.id)
            if g is None:
                continue
            for parent, vjp in node.parents:
                contrib = np.asarray(vjp(g))
                acc = grads.get(parent.id)
                if acc is None:
                    grads[parent.id] = contrib.astype(np.float64, copy=True)
                else:
                    acc += contrib
        self._cached_root = root.id
        self._cached_grads = grads
        return grads

    def grad(self, root: Node, node: Node) -> np.ndarray:
        """Gradient of root w.r.t. a recorded node (zero if unreachable)."""
        grads = self.backward(root)
        g = grads.get(node.id)
        if g is None:
            return np.zeros(node.value.shape)
        return g

    def grad_at_mark(self, root: Node, name: str) -> np.ndarray:
        """Gradient of root at a named intermediate (per sample, not a parameter)."""
        if name not in self.marks:
            raise UnknownMark(
                f"unknown mark {name!r}; available: {sorted(self.marks)}")
        return self.grad(root, self.marks[name])
