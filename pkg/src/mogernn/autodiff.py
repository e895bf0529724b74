"""Small reverse-mode differentiation engine over dense float64 arrays.

Only the primitives the forecaster needs are provided. A computation is
recorded implicitly as each :class:`Tensor` keeps references to its inputs;
:func:`backward` linearises that record into a tape (topological order) and
replays it in reverse.
"""

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DegenerateRowError",
    "tensor",
    "matmul",
    "apply_activation",
    "softmax_rows",
    "keep_top_k",
    "concat_lastdim",
    "backward",
    "build_tape",
]

ACTIVATIONS = ("sigmoid", "tanh", "relu")


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(ValueError):
    """A softmax row has no finite entry."""


def _unbroadcast(grad, shape):
    # sum out the axes numpy broadcast over so grad matches the operand shape
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Dense array node in a differentiable computation."""

    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        a, b = self, other

        def grad_fn(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return _make(a.data + b.data, (a, b), grad_fn, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        a, b = self, other

        def grad_fn(g):
            return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

        return _make(a.data - b.data, (a, b), grad_fn, "sub")

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,), "neg")

    def __mul__(self, other):
        other = _as_tensor(other)
        a, b = self, other

        def grad_fn(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return _make(a.data * b.data, (a, b), grad_fn, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        a, b = self, other

        def grad_fn(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return _make(a.data / b.data, (a, b), grad_fn, "div")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        src_shape = self.shape

        def grad_fn(g):
            out = np.zeros(src_shape)
            np.add.at(out, index, g)
            return (out,)

        return _make(self.data[index], (self,), grad_fn, "getitem")

    # -- reductions / reshaping ---------------------------------------------

    def sum(self, axis=None, keepdims=False):
        src_shape = self.shape

        def grad_fn(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src_shape).copy(),)

        return _make(self.data.sum(axis=axis, keepdims=keepdims), (self,), grad_fn, "sum")

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        src_shape = self.shape
        return _make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(src_shape),), "reshape")

    def square(self):
        return self * self

    # -- activations --------------------------------------------------------

    def sigmoid(self):
        return apply_activation(self, "sigmoid")

    def tanh(self):
        return apply_activation(self, "tanh")

    def relu(self):
        return apply_activation(self, "relu")

    def backward(self):
        backward(self)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, grad_fn, op):
    """Create an op output; records the op only if some input needs a gradient."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, grad_fn, op)
    return Tensor(data)


def custom_op(data, parents, grad_fn, op):
    """Public hook for ops defined outside this module.

    ``grad_fn`` maps the output gradient to one gradient array per parent.
    """
    return _make(np.asarray(data, dtype=np.float64), tuple(parents), grad_fn, op)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    # fast paths fold batch axes into one 2-D product
    if b.ndim == 2 and a.ndim > 2:
        k = a.shape[-1]
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def grad_fn(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _make(out, (a, b), grad_fn, "matmul")
    if a.ndim == 2 and b.ndim > 2:
        m, n = b.shape[-2], b.shape[-1]
        lead = b.shape[:-2]
        b2 = np.moveaxis(b.data, -2, 0).reshape(m, -1)
        out = np.moveaxis((a.data @ b2).reshape((a.shape[0],) + lead + (n,)), 0, -2)

        def grad_fn(g):
            g2 = np.moveaxis(g, -2, 0).reshape(a.shape[0], -1)
            gb = np.moveaxis((a.data.T @ g2).reshape((m,) + lead + (n,)), 0, -2)
            return g2 @ b2.T, gb

        return _make(out, (a, b), grad_fn, "matmul")

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), grad_fn, "matmul")


def apply_activation(x, kind):
    x = _as_tensor(x)
    if kind == "sigmoid":
        # split by sign so exp never overflows
        d = x.data
        e = np.exp(-np.abs(d))
        out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")
    if kind == "tanh":
        out = np.tanh(x.data)
        return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")
    if kind == "relu":
        pos = x.data > 0
        return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def softmax_rows(x):
    """Softmax over the last axis; entries equal to -inf receive exactly zero."""
    x = _as_tensor(x)
    row_max = x.data.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(row_max)):
        raise DegenerateRowError("softmax row has no finite entry")
    e = np.exp(x.data - row_max)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), grad_fn, "softmax")


def keep_top_k(x, k):
    """Replace all but the ``k`` largest entries of each row with -inf.

    Ties resolve towards the lower index.
    """
    x = _as_tensor(x)
    n = x.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    order = np.argsort(-x.data, axis=-1, kind="stable")
    keep = np.zeros(x.shape, dtype=bool)
    np.put_along_axis(keep, order[..., :k], True, axis=-1)
    out = np.where(keep, x.data, -np.inf)
    return _make(out, (x,), lambda g: (np.where(keep, g, 0.0),), "keep_top_k")


def concat_lastdim(*parts):
    parts = [_as_tensor(p) for p in parts]
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat leading dims differ: {parts[0].shape} vs {p.shape}")
    edges = np.cumsum([0] + [p.shape[-1] for p in parts])

    def grad_fn(g):
        return tuple(g[..., edges[i]:edges[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=-1), tuple(parts), grad_fn, "concat")


def build_tape(root):
    """Return the recorded ops reachable from ``root`` in execution order.

    Iterative post-order DFS; each node appears once.
    """
    tape = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            tape.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return tape


def backward(loss):
    """Populate ``.grad`` on every differentiable tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; callers reset them between steps
    (the optimizers here do). Gradients of intermediate nodes are overwritten.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    tape = build_tape(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
