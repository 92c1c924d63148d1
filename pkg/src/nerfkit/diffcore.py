"""Reverse-mode automatic differentiation over dense numpy arrays, plus Adam.

A ParamGraph is a flat tape of Node records appended eagerly as ops run;
backward() walks the tape in reverse. The tape is rebuilt from scratch every
batch -- nothing is cached or compiled. Default dtype is float32 (training);
float64 exists for gradient-check work.
"""

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Operand shapes incompatible for the attempted operation."""


class NonFiniteError(ArithmeticError):
    """NaN or Inf encountered while the graph is in strict mode."""


class GatherIndexError(IndexError):
    """Gather index outside the table."""


class DivergedError(ArithmeticError):
    """Optimizer received non-finite gradients."""


class Node:
    """One tape entry: an op kind, its input nodes, and the computed value."""

    __slots__ = ("graph", "idx", "op", "value", "inputs", "grad", "name", "trainable", "_bwd")

    def __init__(self, graph, idx, op, value, inputs, name=None, trainable=False):
        self.graph = graph
        self.idx = idx
        self.op = op
        self.value = value
        self.inputs = inputs
        self.grad = None
        self.name = name
        self.trainable = trainable
        self._bwd = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" '{self.name}'" if self.name else ""
        return f"<Node {self.idx} {self.op}{tag} {self.value.shape}>"

    # arithmetic sugar; scalars/arrays are lifted to constant leaves
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

    def __getitem__(self, key):
        return slice_(self, key)


class ParamGraph:
    """Tape of recorded array operations over named trainable parameters.

    strict=True checks every forward value and every backward gradient for
    non-finite entries and raises NonFiniteError naming the node; training
    leaves it off and only inspects the loss.
    """

    def __init__(self, dtype=np.float32, strict=False):
        self.dtype = np.dtype(dtype)
        self.strict = strict
        self.nodes = []
        self.parameters = {}  # name -> leaf Node

    def leaf(self, value, name=None, trainable=False):
        value = np.asarray(value, dtype=self.dtype)
        node = self._record("leaf", value, (), None, name=name, trainable=trainable)
        if trainable and name is not None:
            self.parameters[name] = node
        return node

    def _record(self, op, value, inputs, bwd, name=None, trainable=False):
        value = np.asarray(value)
        if value.dtype != self.dtype:
            value = value.astype(self.dtype)
        if self.strict and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite value in forward op '{op}' (node {len(self.nodes)})")
        node = Node(self, len(self.nodes), op, value, inputs, name=name, trainable=trainable)
        node._bwd = bwd
        self.nodes.append(node)
        return node

    def backward(self, loss):
        """Populate .grad on every trainable leaf reachable from `loss`."""
        if loss.graph is not self:
            raise ValueError("loss node belongs to a different graph")
        if loss.value.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")

        needs = [False] * len(self.nodes)
        for node in self.nodes:
            if node.trainable:
                needs[node.idx] = True
            elif any(needs[inp.idx] for inp in node.inputs):
                needs[node.idx] = True

        grads = {loss.idx: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.idx + 1]):
            if node.trainable:
                g = grads.get(node.idx)  # keep: collected below
            else:
                g = grads.pop(node.idx, None)  # free intermediates as we go
            if g is None or node._bwd is None:
                continue
            for inp, gi in zip(node.inputs, node._bwd(g)):
                if gi is None or not needs[inp.idx]:
                    continue
                if self.strict and not np.all(np.isfinite(gi)):
                    raise NonFiniteError(
                        f"non-finite gradient flowing into op '{inp.op}' (node {inp.idx})"
                    )
                # never accumulate in place: backward closures may hand out
                # shared or read-only views (e.g. add returns grad twice)
                if inp.idx in grads:
                    grads[inp.idx] = grads[inp.idx] + gi
                else:
                    grads[inp.idx] = np.asarray(gi, dtype=self.dtype)

        for node in self.nodes:
            if node.trainable:
                g = grads.get(node.idx)
                node.grad = np.zeros_like(node.value) if g is None else g

    def gradients(self):
        """Gradients of all named trainable leaves, keyed by name."""
        return {name: node.grad for name, node in self.parameters.items()}


def _lift(x, like):
    """Return x as a Node on the same graph as `like` (constants become leaves)."""
    if isinstance(x, Node):
        if x.graph is not like.graph:
            raise ValueError("mixing nodes from different graphs")
        return x
    return like.graph.leaf(x)


def _ref(a, b):
    if isinstance(a, Node):
        return a
    if isinstance(b, Node):
        return b
    raise TypeError("at least one operand must be a Node")


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _binary(op, a, b, fwd, bwd_a, bwd_b):
    ref = _ref(a, b)
    a, b = _lift(a, ref), _lift(b, ref)
    try:
        value = fwd(a.value, b.value)
    except ValueError as e:
        raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape}: {e}") from None
    g = a.graph

    def bwd(grad):
        return (
            _unbroadcast(bwd_a(grad, a.value, b.value), a.value.shape),
            _unbroadcast(bwd_b(grad, a.value, b.value), b.value.shape),
        )

    return g._record(op, value, (a, b), bwd)


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b):
    return _binary(
        "div", a, b, lambda x, y: x / y, lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y)
    )


def matmul(a, b):
    ref = _ref(a, b)
    a, b = _lift(a, ref), _lift(b, ref)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.value.shape} @ {b.value.shape}")
    value = a.value @ b.value

    def bwd(grad):
        return grad @ b.value.T, a.value.T @ grad

    return a.graph._record("matmul", value, (a, b), bwd)


def _unary(op, a, fwd, bwd_fn):
    value = fwd(a.value)

    def bwd(grad):
        return (bwd_fn(grad, a.value, value),)

    return a.graph._record(op, value, (a,), bwd)


def neg(a):
    return _unary("neg", a, lambda x: -x, lambda g, x, y: -g)


def relu(a):
    return _unary("relu", a, lambda x: np.maximum(x, 0), lambda g, x, y: g * (x > 0))


def softplus(a):
    # log(1 + e^x), stable for large |x|
    return _unary("softplus", a, lambda x: np.logaddexp(0, x), lambda g, x, y: g * expit(x))


def sigmoid(a):
    return _unary("sigmoid", a, lambda x: expit(x), lambda g, x, y: g * y * (1 - y))


def sin(a):
    return _unary("sin", a, np.sin, lambda g, x, y: g * np.cos(x))


def cos(a):
    return _unary("cos", a, np.cos, lambda g, x, y: -g * np.sin(x))


def exp(a):
    return _unary("exp", a, np.exp, lambda g, x, y: g * y)


def clip_min(a, floor):
    """max(a, floor) for scalar floor; gradient passes where a > floor."""
    return _unary(
        "clip_min", a, lambda x: np.maximum(x, floor), lambda g, x, y: g * (x > floor)
    )


def reshape(a, shape):
    old = a.value.shape
    return _unary("reshape", a, lambda x: x.reshape(shape), lambda g, x, y: g.reshape(old))


def slice_(a, key):
    def bwd(grad, x=None, y=None):
        out = np.zeros_like(a.value)
        out[key] = grad
        return out

    return _unary("slice", a, lambda x: x[key], lambda g, x, y: bwd(g))


def concat(parts, axis=-1):
    parts = list(parts)
    graph = parts[0].graph
    value = np.concatenate([p.value for p in parts], axis=axis)
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(grad):
        return tuple(np.split(grad, splits, axis=axis))

    return graph._record("concat", value, tuple(parts), bwd)


def reduce_sum(a, axis=None, keepdims=False):
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def bwd(grad):
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, a.value.shape),)

    return a.graph._record("reduce_sum", value, (a,), bwd)


def reduce_mean(a, axis=None, keepdims=False):
    value = a.value.mean(axis=axis, keepdims=keepdims)
    count = a.value.size if axis is None else a.value.shape[axis]

    def bwd(grad):
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, a.value.shape) / count,)

    return a.graph._record("reduce_mean", value, (a,), bwd)


def cumsum(a, axis=-1):
    value = np.cumsum(a.value, axis=axis)

    def bwd(grad):
        return (np.flip(np.cumsum(np.flip(grad, axis), axis=axis), axis),)

    return a.graph._record("cumsum", value, (a,), bwd)


def gather(table, idx):
    """Rows of a 2D table at integer indices; backward scatter-adds."""
    idx = np.asarray(idx)
    n = table.value.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)].flat[0]
        raise GatherIndexError(f"gather index {bad} out of range for table of {n} rows")
    value = table.value[idx]
    flat_idx = idx.ravel()
    ncols = table.value.shape[1]

    def bwd(grad):
        g2 = grad.reshape(-1, ncols)
        out = np.empty_like(table.value)
        for c in range(ncols):
            out[:, c] = np.bincount(flat_idx, weights=g2[:, c], minlength=n)
        return (out,)

    return table.graph._record("gather", value, (table,), bwd)


class AdamState:
    """Adam moments and step counter for a named parameter dict."""

    def __init__(self, params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}


def adam_step(params, grads, state):
    """One Adam update with bias correction; mutates params/state in place.

    Validates every gradient before touching anything so a divergence
    aborts the whole update rather than half-applying it.
    """
    for name in params:
        g = grads[name]
        if g.shape != params[name].shape:
            raise ShapeError(
                f"gradient shape {g.shape} != parameter shape {params[name].shape} for '{name}'"
            )
        if not np.all(np.isfinite(g)):
            raise DivergedError(f"diverged: non-finite gradient for '{name}'")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    scale = state.lr * np.sqrt(1.0 - b2**t) / (1.0 - b1**t)
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        # p -= lr * m_hat / (sqrt(v_hat) + eps), folded into one scale factor
        p -= (scale * m / (np.sqrt(v) + state.eps * np.sqrt(1.0 - b2**t))).astype(p.dtype)
    return params, state
