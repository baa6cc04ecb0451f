"""Reverse-mode automatic differentiation over numpy arrays.

Every operation records its parents and a vector-Jacobian closure written in
terms of other :class:`Tensor` operations, so gradients are themselves
differentiable when ``create_graph=True``. That is what lets the Laplacian
penalty (built from input gradients) be differentiated again with respect to
the network parameters.
"""

from contextlib import contextmanager

import numpy as np

from ..exceptions import NumericalError

_GRAD_ENABLED = [True]


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


@contextmanager
def enable_grad():
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = True
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


def is_grad_enabled():
    return _GRAD_ENABLED[0]


class Tensor:
    """A node of the computation graph wrapping a float64 array."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp
        self.op = op

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)
    __rmatmul__ = lambda self, other: matmul(other, self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _need(t):
    return t.requires_grad or None


def _make(data, parents, vjp, op):
    parents = tuple(parents)
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, vjp, op)
    return Tensor(data, op=op)


def sum_to(x, shape):
    """Reduce a broadcast tensor back to ``shape``."""
    x = as_tensor(x)
    if x.shape == tuple(shape):
        return x
    ndiff = x.ndim - len(shape)
    axes = tuple(range(ndiff)) + tuple(
        i + ndiff for i, s in enumerate(shape) if s == 1 and x.shape[i + ndiff] != 1
    )
    out = x.data.sum(axis=axes, keepdims=True)
    if ndiff:
        out = out.reshape(out.shape[ndiff:])
    out = out.reshape(shape)
    return _make(out, (x,), lambda g: (broadcast_to(g, x.shape),), "sum_to")


def broadcast_to(x, shape):
    x = as_tensor(x)
    if x.shape == tuple(shape):
        return x
    out = np.broadcast_to(x.data, shape)
    return _make(out, (x,), lambda g: (sum_to(g, x.shape),), "broadcast_to")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_need(a) and sum_to(g, a.shape), _need(b) and sum_to(g, b.shape)),
        "add",
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_need(a) and sum_to(g, a.shape), _need(b) and sum_to(neg(g), b.shape)),
        "sub",
    )


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_need(a) and sum_to(mul(g, b), a.shape), _need(b) and sum_to(mul(g, a), b.shape)),
        "mul",
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        ga = _need(a) and sum_to(div(g, b), a.shape)
        gb = _need(b) and sum_to(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _make(out, (a, b), vjp, "div")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (_need(a) and matmul(g, transpose(b)), _need(b) and matmul(transpose(a), g)),
        "matmul",
    )


def transpose(a):
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (transpose(g),), "transpose")


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, a.shape),), "reshape")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    node = _make(out, (a,), None, "tanh")
    if node.requires_grad:
        # the output node itself carries the derivative so higher orders flow
        node._vjp = lambda g: (mul(g, sub(1.0, mul(node, node))),)
    return node


def exp(a):
    a = as_tensor(a)
    node = _make(np.exp(a.data), (a,), None, "exp")
    if node.requires_grad:
        node._vjp = lambda g: (mul(g, node),)
    return node


def square(a):
    return mul(a, a)


def elu(a, alpha=1.0):
    """Exponential linear unit ``x if x > 0 else alpha * (exp(x) - 1)``."""
    a = as_tensor(a)
    pos = (a.data > 0).astype(np.float64)
    neg_part = mul(a, 1.0 - pos)
    return add(mul(a, pos), mul(alpha * (1.0 - pos), sub(exp(neg_part), 1.0)))


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            axes = tuple(ax % a.ndim for ax in axes)
            shape = [1 if i in axes else s for i, s in enumerate(a.shape)]
            g = reshape(g, tuple(shape))
        return (broadcast_to(g, a.shape),)

    return _make(out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def vjp(g):
        pieces = []
        start = 0
        for t in tensors:
            stop = start + t.shape[axis]
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, stop)
            pieces.append(getitem(g, tuple(idx)))
            start = stop
        return tuple(pieces)

    return _make(out, tensors, vjp, "concat")


def getitem(a, idx):
    a = as_tensor(a)
    return _make(a.data[idx], (a,), lambda g: (index_add(g, idx, a.shape),), "getitem")


def index_add(g, idx, shape):
    """Scatter ``g`` into zeros of ``shape`` at ``idx`` (adjoint of indexing)."""
    g = as_tensor(g)
    out = np.zeros(shape)
    np.add.at(out, idx, g.data)
    return _make(out, (g,), lambda h: (getitem(h, idx),), "index_add")


def _topo_order(roots):
    order, seen = [], set()
    stack = [(r, False) for r in roots]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order[::-1]


def grad(output, inputs, grad_output=None, create_graph=False, allow_unused=True):
    """Gradients of ``output`` with respect to each tensor in ``inputs``.

    Parameters
    ----------
    output : Tensor
        Usually a scalar. For non-scalars supply ``grad_output``.
    inputs : Tensor or sequence of Tensor
    create_graph : bool
        Record the backward pass so the result can be differentiated again.

    Returns
    -------
    list of Tensor, one per input (zeros for inputs not reached).
    """
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    if grad_output is None:
        if output.data.size != 1:
            raise ValueError("grad_output required for non-scalar outputs")
        grad_output = np.ones_like(output.data)
    if not np.all(np.isfinite(output.data)):
        raise NumericalError("non-finite output", node=output.op)
    grads = {id(output): as_tensor(grad_output)}
    if not output.requires_grad:
        res = [Tensor(np.zeros_like(x.data)) for x in inputs]
        return res[0] if single else res

    keep = {id(x) for x in inputs}
    ctx = enable_grad() if create_graph else no_grad()
    with ctx:
        for node in _topo_order([output]):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            if id(node) not in keep:
                del grads[id(node)]
            if not np.all(np.isfinite(g.data)):
                raise NumericalError("non-finite gradient", node=node.op)
            for p, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)

    result = []
    for x in inputs:
        g = grads.get(id(x))
        if g is None:
            if not allow_unused:
                raise ValueError("input not reachable from output")
            g = Tensor(np.zeros_like(x.data))
        elif not create_graph:
            g = Tensor(g.data)
        result.append(g)
    return result[0] if single else result
