"""A small tape-free reverse-mode autodiff engine over float64 numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back to them.  ``backward`` walks the
graph once in reverse topological order and then releases it; a second
``backward`` on the same graph raises :class:`~mbdm.errors.UsageError`.

Only the operations the score network and its losses need are provided.
"""

from __future__ import annotations

import numpy as np

from mbdm.errors import NumericFailure, UsageError


def sigmoid(x: np.ndarray) -> np.ndarray:
    # 1 / (1 + exp(-x)); exp overflow to inf gives the correct limit 0
    with np.errstate(over="ignore"):
        s = np.negative(x)
        np.exp(s, out=s)
    s += 1.0
    np.reciprocal(s, out=s)
    return s


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (undo numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation graph.

    ``data`` is always a float64 ndarray.  ``grad`` is populated by
    :meth:`backward` for nodes with ``requires_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "op")
    # make ndarray <op> Tensor defer to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, _parents=(), op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self._consumed = False
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _wrap(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def _child(self, data, parents, op):
        for p in parents:
            if p._consumed:
                raise UsageError("cannot extend a graph that was consumed by backward")
        needs = any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), op=op)
        return out

    def __add__(self, other):
        other = self._wrap(other)
        out = self._child(self.data + other.data, (self, other), "add")
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g, other.data.shape))
            out._backward = backward
        return out

    __radd__ = __add__

    def __neg__(self):
        out = self._child(-self.data, (self,), "neg")
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(-g)
        return out

    def __sub__(self, other):
        return self + (-self._wrap(other))

    def __rsub__(self, other):
        return self._wrap(other) + (-self)

    def __mul__(self, other):
        other = self._wrap(other)
        out = self._child(self.data * other.data, (self, other), "mul")
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g * other.data, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g * self.data, other.data.shape))
            out._backward = backward
        return out

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = self._wrap(other)
        out = self._child(self.data @ other.data, (self, other), "matmul")
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    self._accumulate(g @ other.data.T, owned=True)
                if other.requires_grad:
                    other._accumulate(self.data.T @ g, owned=True)
            out._backward = backward
        return out

    def __rmatmul__(self, other):
        return self._wrap(other) @ self

    def linear(self, weight, bias):
        """Fused ``self @ weight + bias``."""
        weight, bias = self._wrap(weight), self._wrap(bias)
        data = self.data @ weight.data
        data += bias.data
        out = self._child(data, (self, weight, bias), "linear")
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    self._accumulate(g @ weight.data.T, owned=True)
                if weight.requires_grad:
                    weight._accumulate(self.data.T @ g, owned=True)
                if bias.requires_grad:
                    bias._accumulate(g.sum(axis=0), owned=True)
            out._backward = backward
        return out

    def silu(self):
        sig = sigmoid(self.data)
        out = self._child(self.data * sig, (self,), "silu")
        if out.requires_grad:
            def backward(g):
                # d/dx x*s(x) = s * (1 + x*(1 - s))
                d = 1.0 - sig
                d *= self.data
                d += 1.0
                d *= sig
                d *= g
                self._accumulate(d, owned=True)
            out._backward = backward
        return out

    def square(self):
        out = self._child(self.data * self.data, (self,), "square")
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(2.0 * g * self.data)
        return out

    def sum(self, axis=None):
        out = self._child(self.data.sum(axis=axis), (self,), "sum")
        if out.requires_grad:
            def backward(g):
                if axis is not None:
                    g = np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(g, self.data.shape))
            out._backward = backward
        return out

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    # -- backward -------------------------------------------------------------

    def _accumulate(self, g, owned=False):
        # owned: g is a fresh array nobody else references, safe to keep
        if self.grad is None:
            self.grad = g if owned else np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Backpropagate from this scalar node, then free the graph."""
        if self._consumed:
            raise UsageError("graph already consumed by a previous backward pass")
        if self.data.size != 1:
            raise UsageError(f"backward needs a scalar output, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise NumericFailure("non-finite loss", value=float(self.data))

        order = []
        seen = set()
        stack = [(self, False)]
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

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            node._backward = None
            if node._parents:
                # interior node: drop its gradient and references
                node._consumed = True
                node._parents = ()
                if node is not self:
                    node.grad = None
        self._consumed = True


def silu(x):
    """SiLU that works on both plain arrays and :class:`Tensor`."""
    if isinstance(x, Tensor):
        return x.silu()
    s = sigmoid(x)
    s *= x
    return s


def linear(x, weight, bias):
    """``x @ weight + bias`` for arrays or tensors (graph built if any is a Tensor)."""
    if isinstance(x, Tensor):
        return x.linear(weight, bias)
    if isinstance(weight, Tensor) or isinstance(bias, Tensor):
        return Tensor(x).linear(weight, bias)
    out = x @ weight
    out += bias
    return out
