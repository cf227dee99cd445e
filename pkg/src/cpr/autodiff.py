"""Small reverse-mode autodiff over dense float64 tensors of rank <= 2.

Every op returns a new :class:`Value` holding its parents and a closure that
pushes the output gradient back to them.  ``backward`` orders the reachable
graph into a :class:`Tape` and walks it in reverse.

Batching is an explicit leading dimension; the only broadcast supported is a
``(1, n)`` row against a ``(B, n)`` matrix in elementwise ops.
"""
from __future__ import annotations

import numpy as np

EPS = 1e-7


class ShapeError(ValueError):
    pass


def _as_array(x) -> np.ndarray:
    arr = np.array(x, dtype=np.float64)
    if arr.ndim > 2:
        raise ShapeError(f"rank {arr.ndim} tensor not supported, shape {arr.shape}")
    return arr


class Value:
    __slots__ = ("data", "grad", "parents", "_backward", "op", "requires_grad")

    def __init__(self, data, parents=(), op="", requires_grad=True):
        self.data = _as_array(data)
        self.grad = np.zeros_like(self.data)
        self.parents = tuple(parents)
        self._backward = None
        self.op = op
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Value(shape={self.data.shape}, op={self.op!r})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        backward(self)

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def const(x) -> Value:
    """Wrap data that never needs a gradient."""
    return x if isinstance(x, Value) else Value(x, requires_grad=False)


def _make(data, parents, op, backward_fn):
    out = Value(data, parents, op, requires_grad=any(p.requires_grad for p in parents))
    out._backward = backward_fn
    return out


def _check_elementwise(a: Value, b: Value, name: str):
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if len(sa) == 2 and len(sb) == 2 and sa[1] == sb[1] and 1 in (sa[0], sb[0]):
        return
    if sa == () or sb == ():
        return
    raise ShapeError(f"{name}: incompatible shapes {sa} and {sb}")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    # (1, n) operand broadcast over the batch rows
    return grad.sum(axis=0, keepdims=True).reshape(shape)


def add(a, b) -> Value:
    a, b = const(a), const(b)
    _check_elementwise(a, b, "add")
    out = None

    def bw():
        a.grad += _unbroadcast(out.grad, a.shape)
        b.grad += _unbroadcast(out.grad, b.shape)

    out = _make(a.data + b.data, (a, b), "add", bw)
    return out


def sub(a, b) -> Value:
    a, b = const(a), const(b)
    _check_elementwise(a, b, "sub")
    out = None

    def bw():
        a.grad += _unbroadcast(out.grad, a.shape)
        b.grad -= _unbroadcast(out.grad, b.shape)

    out = _make(a.data - b.data, (a, b), "sub", bw)
    return out


def mul(a, b) -> Value:
    a, b = const(a), const(b)
    _check_elementwise(a, b, "mul")
    out = None

    def bw():
        a.grad += _unbroadcast(out.grad * b.data, a.shape)
        b.grad += _unbroadcast(out.grad * a.data, b.shape)

    out = _make(a.data * b.data, (a, b), "mul", bw)
    return out


def matmul(a, b) -> Value:
    a, b = const(a), const(b)
    if a.data.ndim == 0 or b.data.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = None

    def bw():
        g = out.grad
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            a.grad += g * bd
            b.grad += g * ad
        elif ad.ndim == 1:
            a.grad += bd @ g
            b.grad += np.outer(ad, g)
        elif bd.ndim == 1:
            a.grad += np.outer(g, bd)
            b.grad += ad.T @ g
        else:
            a.grad += g @ bd.T
            b.grad += ad.T @ g

    out = _make(a.data @ b.data, (a, b), "matmul", bw)
    return out


def concat(values, axis: int = -1) -> Value:
    values = [const(v) for v in values]
    ndims = {v.data.ndim for v in values}
    if len(ndims) != 1:
        raise ShapeError(f"concat: mixed ranks {[v.shape for v in values]}")
    datas = [v.data for v in values]
    try:
        data = np.concatenate(datas, axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[v.shape for v in values]}") from None
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]
    out = None

    def bw():
        for v, g in zip(values, np.split(out.grad, sizes, axis=axis)):
            v.grad += g

    out = _make(data, values, "concat", bw)
    return out


def columns(a: Value, start: int, stop: int) -> Value:
    """Slice ``a[..., start:stop]``."""
    a = const(a)
    out = None

    def bw():
        a.grad[..., start:stop] += out.grad

    out = _make(a.data[..., start:stop], (a,), "columns", bw)
    return out


def tanh(a) -> Value:
    a = const(a)
    y = np.tanh(a.data)
    out = None

    def bw():
        a.grad += out.grad * (1.0 - y * y)

    out = _make(y, (a,), "tanh", bw)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Value:
    a = const(a)
    y = _sigmoid(a.data)
    out = None

    def bw():
        a.grad += out.grad * y * (1.0 - y)

    out = _make(y, (a,), "sigmoid", bw)
    return out


def absolute(a) -> Value:
    a = const(a)
    out = None

    def bw():
        a.grad += out.grad * np.sign(a.data)

    out = _make(np.abs(a.data), (a,), "abs", bw)
    return out


def sum(a, axis=None) -> Value:  # noqa: A001
    """Sum all entries, or along ``axis`` keeping that axis with size 1."""
    a = const(a)
    keep = axis is not None
    out = None

    def bw():
        a.grad += np.broadcast_to(out.grad, a.shape) if keep else out.grad * np.ones_like(a.data)

    out = _make(a.data.sum(axis=axis, keepdims=keep), (a,), "sum", bw)
    return out


def mean(a) -> Value:
    a = const(a)
    n = a.data.size
    out = None

    def bw():
        a.grad += out.grad * np.ones_like(a.data) / n

    out = _make(a.data.mean(), (a,), "mean", bw)
    return out


def l1(a) -> Value:
    """Sum of absolute values; subgradient sign(x) with sign(0) = 0."""
    return sum(absolute(a))


def bce(p, y) -> Value:
    """Elementwise binary cross-entropy of probabilities ``p`` against labels ``y``.

    Probabilities are clipped to ``[EPS, 1 - EPS]``.  The gradient is the
    unclipped formula evaluated at the clipped point, so it stays finite and
    keeps its sign even for saturated inputs.
    """
    p, y = const(p), const(y)
    _check_elementwise(p, y, "bce")
    pc = np.clip(p.data, EPS, 1.0 - EPS)
    yd = y.data
    loss = -(yd * np.log(pc) + (1.0 - yd) * np.log1p(-pc))
    out = None

    def bw():
        p.grad += _unbroadcast(out.grad * (pc - yd) / (pc * (1.0 - pc)), p.shape)

    out = _make(loss, (p, y), "bce", bw)
    return out


class Tape:
    """Topologically ordered record of every node that feeds ``root``."""

    def __init__(self, root: Value):
        self.root = root
        self.nodes: list[Value] = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

    def __len__(self):
        return len(self.nodes)

    def backward(self):
        """Accumulate d(root)/d(leaf) into every leaf's ``grad``.

        Interior gradients are reset first, so repeating the pass adds exactly
        one more copy of the gradient to each leaf.
        """
        for node in self.nodes:
            if node.parents:
                node.zero_grad()
        self.root.grad += np.ones_like(self.root.data)
        for node in reversed(self.nodes):
            if node._backward is not None:
                node._backward()

    def zero_grad(self):
        for node in self.nodes:
            node.zero_grad()


def backward(loss: Value) -> Tape:
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape(loss)
    tape.backward()
    return tape


def grad_check(f, point, step: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` maps a :class:`Value` to a scalar :class:`Value`.  The error per
    coordinate is ``|ad - fd| / max(1, |fd|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = _as_array(point)
    x = Value(x0.copy())
    out = f(x)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite function value")
    if out.requires_grad:
        backward(out)
    analytic = x.grad.copy()

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += step
        xm[i] -= step
        fp = f(Value(xp.reshape(x0.shape), requires_grad=False)).data
        fm = f(Value(xm.reshape(x0.shape), requires_grad=False)).data
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError("non-finite function value")
        flat[i] = (float(fp) - float(fm)) / (2 * step)
    if not np.all(np.isfinite(analytic)):
        raise FloatingPointError("non-finite gradient")
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def grad_check_params(loss_fn, params: dict, step: float = 1e-5) -> float:
    """:func:`grad_check` over a dict of named arrays.

    ``loss_fn`` receives a dict of Values with the same keys and returns a
    scalar Value.
    """
    names = list(params)
    shapes = [np.shape(params[n]) for n in names]
    sizes = [int(np.prod(s)) for s in shapes]
    offsets = np.cumsum([0] + sizes[:-1])

    def unpack(x: Value) -> dict:
        return {n: x.data[o:o + s].reshape(shape) for n, o, s, shape in zip(names, offsets, sizes, shapes)}

    def f(x: Value) -> Value:
        if not x.requires_grad:
            return loss_fn({n: const(v) for n, v in unpack(x).items()})
        P = {n: Value(v) for n, v in unpack(x).items()}
        out = loss_fn(P)
        backward(out)
        # route the per-parameter gradients back onto the flat point
        x.grad += np.concatenate([P[n].grad.ravel() for n in names])
        return const(out.data)

    flat = np.concatenate([np.asarray(params[n], dtype=np.float64).ravel() for n in names])
    return grad_check(f, flat, step)
