"""Reverse-mode automatic differentiation over numpy arrays.

Operations are matrix-level (affine maps, elementwise activations,
reductions, log-sum-exp) rather than a scalar tape. Each Tensor produced
by an operation keeps references to its parents together with a closure
that routes the output adjoint back to them; `backward()` replays the
closures in reverse topological order. Everything runs in float64.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over axes that numpy broadcasting introduced or stretched."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 numpy array plus the bookkeeping for reverse mode."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_push")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._push = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return _node(self.data.T, (self,), lambda g: _accum(self, g.T))

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Populate .grad on every tensor reachable from this scalar root."""
        if self.data.size != 1:
            raise ContractError("backward requires a scalar root")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._push is not None and node.grad is not None:
                node._push(node.grad)

    # arithmetic

    def __add__(self, other):
        o = _wrap(other)
        return _node(self.data + o.data, (self, o),
                     lambda g: (_accum(self, g), _accum(o, g)))

    __radd__ = __add__

    def __sub__(self, other):
        o = _wrap(other)
        return _node(self.data - o.data, (self, o),
                     lambda g: (_accum(self, g), _accum(o, -g)))

    def __rsub__(self, other):
        return _wrap(other) - self

    def __mul__(self, other):
        o = _wrap(other)
        return _node(self.data * o.data, (self, o),
                     lambda g: (_accum(self, g * o.data), _accum(o, g * self.data)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = _wrap(other)
        return _node(self.data / o.data, (self, o),
                     lambda g: (_accum(self, g / o.data),
                                _accum(o, -g * self.data / (o.data * o.data))))

    def __rtruediv__(self, other):
        return _wrap(other) / self

    def __neg__(self):
        return _node(-self.data, (self,), lambda g: _accum(self, -g))

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise ContractError("only constant exponents are differentiable here")
        return _node(self.data ** p, (self,),
                     lambda g: _accum(self, g * p * self.data ** (p - 1)))

    def __matmul__(self, other):
        o = _wrap(other)
        return _node(self.data @ o.data, (self, o),
                     lambda g: (_accum(self, g @ o.data.T), _accum(o, self.data.T @ g)))

    # reductions and elementwise maps

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def push(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            _accum(self, np.broadcast_to(gg, self.data.shape))

        return _node(out, (self,), push)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)
        return _node(out_data, (self,), lambda g: _accum(self, g * out_data))

    def log(self) -> "Tensor":
        return _node(np.log(self.data), (self,), lambda g: _accum(self, g / self.data))

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)
        return _node(out_data, (self,), lambda g: _accum(self, g * 0.5 / out_data))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = _unbroadcast(np.asarray(g, dtype=np.float64), t.data.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _node(data, parents, push) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._push = push
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: _accum(x, g * mask))


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    # d/du [u*sigmoid(u)] = sigmoid(u) * (1 + u * (1 - sigmoid(u)))
    deriv = sig * (1.0 + x.data * (1.0 - sig))
    return _node(x.data * sig, (x,), lambda g: _accum(x, g * deriv))


def clamp_max(x: Tensor, hi: float) -> Tensor:
    mask = x.data <= hi
    return _node(np.minimum(x.data, hi), (x,), lambda g: _accum(x, g * mask))


def logsumexp(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max-shifted log-sum-exp; -inf entries contribute zero weight."""
    m = np.max(x.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out_data = np.log(s) + m
    if not keepdims:
        out_data = np.squeeze(out_data, axis=axis)

    def push(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        _accum(x, gg * (e / s))

    return _node(out_data, (x,), push)


def concat(tensors: list[Tensor], axis: int = 1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def push(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            _accum(t, np.take(g, range(lo, hi), axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), push)


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup table[idx]; backward scatter-adds into the table."""
    idx = np.asarray(idx, dtype=np.int64)

    def push(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        _accum(table, full)

    return _node(table.data[idx], (table,), push)


class Adam:
    """Standard bias-corrected Adam over a list of parameter Tensors."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.beta1, self.beta2 = lr, beta1, beta2
        self.eps, self.weight_decay = eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** self.t)
            v_hat = v / (1.0 - self.beta2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SgdMomentum:
    """SGD with classical momentum."""

    def __init__(self, params, lr: float = 1e-2, momentum: float = 0.9):
        self.params = list(params)
        self.lr, self.momentum = lr, momentum
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, b in zip(self.params, self.buf):
            if p.grad is None:
                continue
            b *= self.momentum
            b += p.grad
            p.data -= self.lr * b
