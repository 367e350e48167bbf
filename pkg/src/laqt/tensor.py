"""Dense float64 tensors with reverse-mode automatic differentiation.

Define-by-run: every operation records its parent tensors and a backward
closure on its result, so the graph is rebuilt on each forward pass. A call
to ``backward()`` on a scalar loss seeds d(loss)/d(loss) = 1 and walks the
recorded graph exactly once in reverse topological order, accumulating into
``.grad``. Gradients are not cleared implicitly: call ``zero_grad`` on the
parameters before every backward pass. Double backward is unsupported.

Everything is float64. Broadcasting follows numpy for elementwise ops and
batched matmul; gradients are summed back down to the operand shapes.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "affine",
    "layer_norm_op",
    "concat",
    "stack",
    "unstack",
    "straight_through",
    "dropout",
    "zero_grad",
]

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class no_grad:
    """Disable graph recording inside the block; forward values only."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accum(t: "Tensor", g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _make(data, parents, op, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._done = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _wrap(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _topo(root: "Tensor") -> list["Tensor"]:
    # Iterative DFS: recursion would overflow on long recurrent unrolls.
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        nid = id(node)
        if nid in visited:
            continue
        visited.add(nid)
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._done = False

    # ---- introspection ----

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # ---- graph ----

    def backward(self) -> None:
        """Accumulate d(self)/d(params) into .grad for every reachable tensor."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("loss does not depend on any tensor that requires grad")
        if self._done:
            raise RuntimeError(
                "backward() already ran on this graph; rebuild the forward pass "
                "(and zero_grad the parameters) before calling it again"
            )
        self._done = True
        order = _topo(self)
        self.grad = np.ones_like(self.data)
        for t in reversed(order):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # ---- arithmetic ----

    def __add__(self, other):
        a, b = self, _wrap(other)
        data = a.data + b.data

        def bw(g):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(g, b.data.shape))

        return _make(data, (a, b), "add", bw)

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self, _wrap(other)
        data = a.data - b.data

        def bw(g):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(-g, b.data.shape))

        return _make(data, (a, b), "sub", bw)

    def __rsub__(self, other):
        return _wrap(other) - self

    def __neg__(self):
        a = self

        def bw(g):
            _accum(a, -g)

        return _make(-a.data, (a,), "neg", bw)

    def __mul__(self, other):
        a, b = self, _wrap(other)
        data = a.data * b.data

        def bw(g):
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

        return _make(data, (a, b), "mul", bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, _wrap(other)
        data = a.data / b.data

        def bw(g):
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return _make(data, (a, b), "div", bw)

    def __rtruediv__(self, other):
        return _wrap(other) / self

    def __pow__(self, exponent: float):
        a = self
        p = float(exponent)
        data = a.data**p

        def bw(g):
            _accum(a, g * p * a.data ** (p - 1.0))

        return _make(data, (a,), "pow", bw)

    def __matmul__(self, other):
        a, b = self, _wrap(other)
        if a.data.ndim < 2 or b.data.ndim < 2:
            raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
        if a.data.shape[-1] != b.data.shape[-2]:
            raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
        data = a.data @ b.data

        def bw(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

        return _make(data, (a, b), "matmul", bw)

    def matmul(self, other):
        return self @ other

    # ---- elementwise nonlinearities ----

    def relu(self):
        a = self
        data = np.maximum(a.data, 0.0)

        def bw(g):
            _accum(a, g * (a.data > 0.0))

        return _make(data, (a,), "relu", bw)

    def elu(self, alpha: float = 1.0):
        a = self
        neg = alpha * (np.exp(np.minimum(a.data, 0.0)) - 1.0)
        data = np.where(a.data > 0.0, a.data, neg)

        def bw(g):
            _accum(a, g * np.where(a.data > 0.0, 1.0, neg + alpha))

        return _make(data, (a,), "elu", bw)

    def abs(self):
        a = self
        data = np.abs(a.data)

        def bw(g):
            _accum(a, g * np.sign(a.data))

        return _make(data, (a,), "abs", bw)

    def exp(self):
        a = self
        data = np.exp(a.data)

        def bw(g):
            _accum(a, g * data)

        return _make(data, (a,), "exp", bw)

    def log(self):
        a = self
        data = np.log(a.data)

        def bw(g):
            _accum(a, g / a.data)

        return _make(data, (a,), "log", bw)

    def sqrt(self):
        a = self
        data = np.sqrt(a.data)

        def bw(g):
            _accum(a, g * 0.5 / data)

        return _make(data, (a,), "sqrt", bw)

    def tanh(self):
        a = self
        data = np.tanh(a.data)

        def bw(g):
            _accum(a, g * (1.0 - data * data))

        return _make(data, (a,), "tanh", bw)

    def sigmoid(self):
        a = self
        data = 1.0 / (1.0 + np.exp(-a.data))

        def bw(g):
            _accum(a, g * data * (1.0 - data))

        return _make(data, (a,), "sigmoid", bw)

    def softmax(self, axis: int = -1):
        """Numerically stabilized softmax along ``axis``; slices sum to 1."""
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        data = e / e.sum(axis=axis, keepdims=True)

        def bw(g):
            dot = (g * data).sum(axis=axis, keepdims=True)
            _accum(a, data * (g - dot))

        return _make(data, (a,), "softmax", bw)

    # ---- reductions ----

    @staticmethod
    def _axis_tuple(axis, ndim):
        if axis is None:
            return tuple(range(ndim))
        if isinstance(axis, int):
            axis = (axis,)
        return tuple(ax % ndim for ax in axis)

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        axes = Tensor._axis_tuple(axis, a.data.ndim)
        data = a.data.sum(axis=axes, keepdims=keepdims)

        def bw(g):
            gg = g if keepdims else np.expand_dims(g, axes)
            _accum(a, np.broadcast_to(gg, a.data.shape))

        return _make(data, (a,), "sum", bw)

    def mean(self, axis=None, keepdims: bool = False):
        a = self
        axes = Tensor._axis_tuple(axis, a.data.ndim)
        count = float(np.prod([a.data.shape[ax] for ax in axes]))
        data = a.data.mean(axis=axes, keepdims=keepdims)

        def bw(g):
            gg = g if keepdims else np.expand_dims(g, axes)
            _accum(a, np.broadcast_to(gg / count, a.data.shape))

        return _make(data, (a,), "mean", bw)

    # ---- shape manipulation ----

    def reshape(self, *shape):
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = a.data.reshape(shape)

        def bw(g):
            _accum(a, g.reshape(a.data.shape))

        return _make(data, (a,), "reshape", bw)

    def swapaxes(self, ax1: int, ax2: int):
        a = self
        data = np.swapaxes(a.data, ax1, ax2)

        def bw(g):
            _accum(a, np.swapaxes(g, ax1, ax2))

        return _make(data, (a,), "swapaxes", bw)

    def broadcast_to(self, shape):
        a = self
        shape = tuple(shape)
        data = np.broadcast_to(a.data, shape)

        def bw(g):
            _accum(a, _unbroadcast(g, a.data.shape))

        return _make(data, (a,), "broadcast", bw)

    def __getitem__(self, key):
        # Basic indexing only (ints / slices / Ellipsis): every input element
        # appears at most once in the output, so the backward scatter is a
        # plain assignment into zeros.
        a = self
        data = a.data[key]

        def bw(g):
            z = np.zeros_like(a.data)
            z[key] = g
            _accum(a, z)

        return _make(data, (a,), "slice", bw)

    def take_along(self, indices: np.ndarray, axis: int):
        """Gather one element per position along ``axis`` (index size 1)."""
        a = self
        if indices.shape[axis] != 1:
            raise ShapeError("take_along requires a single index per slice")
        idx = indices
        data = np.take_along_axis(a.data, idx, axis=axis)

        def bw(g):
            z = np.zeros_like(a.data)
            np.put_along_axis(z, idx, g, axis=axis)
            _accum(a, z)

        return _make(data, (a,), "take_along", bw)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight.T + bias as one recorded op (weight is [out, in])."""
    out_dim, in_dim = weight.shape
    if x.shape[-1] != in_dim:
        raise ShapeError(f"affine: input {x.shape} does not match weight {weight.shape}")
    x2 = x.data.reshape(-1, in_dim)
    data = (x2 @ weight.data.T + bias.data).reshape(x.shape[:-1] + (out_dim,))

    def bw(g):
        g2 = g.reshape(-1, out_dim)
        _accum(x, (g2 @ weight.data).reshape(x.data.shape))
        _accum(weight, g2.T @ x2)
        _accum(bias, g2.sum(axis=0))

    return _make(data, (x, weight, bias), "affine", bw)


def layer_norm_op(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis, then scale and shift (one op)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    std = np.sqrt(var + eps)
    xhat = (x.data - mu) / std
    data = xhat * gain.data + shift.data

    def bw(g):
        if gain.requires_grad:
            axes = tuple(range(g.ndim - 1))
            _accum(gain, (g * xhat).sum(axis=axes))
        if shift.requires_grad:
            _accum(shift, g.sum(axis=tuple(range(g.ndim - 1))))
        if x.requires_grad:
            dxhat = g * gain.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True)
            term -= xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, term / std)

    return _make(data, (x, gain, shift), "layer_norm", bw)


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [(_wrap(t)) for t in tensors]
    arrs = [t.data for t in ts]
    data = np.concatenate(arrs, axis=axis)
    sizes = [arr.shape[axis] for arr in arrs]
    split_at = list(np.cumsum(sizes[:-1]))

    def bw(g):
        for t, piece in zip(ts, np.split(g, split_at, axis=axis)):
            _accum(t, piece)

    return _make(data, tuple(ts), "concat", bw)


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [(_wrap(t)) for t in tensors]
    data = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        for i, t in enumerate(ts):
            _accum(t, np.take(g, i, axis=axis))

    return _make(data, tuple(ts), "stack", bw)


def unstack(t: Tensor) -> list[Tensor]:
    """Split along axis 0 into views; the slices accumulate their gradients
    in place into one shared buffer instead of scattering into fresh
    full-size zero arrays."""

    def make_bw(i):
        def bw(g):
            if not t.requires_grad:
                return
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            elif not t.grad.flags.writeable:
                t.grad = t.grad.copy()
            t.grad[i] += g

        return bw

    return [_make(t.data[i], (t,), "unstack", make_bw(i)) for i in range(t.shape[0])]


def straight_through(hard_values: np.ndarray, soft: Tensor) -> Tensor:
    """Forward the discrete values, route the gradient to the soft relaxation."""
    data = np.asarray(hard_values, dtype=np.float64)
    if data.shape != soft.shape:
        raise ShapeError(f"straight_through shapes disagree: {data.shape} vs {soft.shape}")

    def bw(g):
        _accum(soft, g)

    return _make(data, (soft,), "straight_through", bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    if rate == 0.0:
        return x
    if not 0.0 < rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None:
        raise ValueError("dropout with rate > 0 needs a seeded generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(mask)


def zero_grad(params) -> None:
    """Clear gradients on an iterable or dict of tensors."""
    if isinstance(params, dict):
        params = params.values()
    for p in params:
        p.grad = None
