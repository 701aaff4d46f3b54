"""Dense float64 tensors with taped reverse-mode differentiation.

Every op records a backward closure on the output tensor; ``backward()``
walks the tape in reverse topological order. The primitive set is fixed
(matmul, add, mul, concat, slice/gather, embedding lookup, softmax,
log-softmax, sigmoid, tanh, relu, layer-norm, log, sum, mean); higher
layers (GRU cells, attention blocks) are compositions of these.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf, which the kernel treats as an error state."""


class BackwardError(ValueError):
    """backward() called on an unsupported target (e.g. a non-scalar)."""


_grad_enabled = True


class no_grad:
    """Context manager: ops inside skip tape construction (inference path)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(op: str, data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values (shape {data.shape})")


class Tensor:
    """A float64 ndarray plus the tape links needed for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # Arithmetic sugar; plain numbers/ndarrays are lifted to constants.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return mul(self, _lift(-1.0))

    def __sub__(self, other):
        return add(self, mul(_lift(other), _lift(-1.0)))

    def __rsub__(self, other):
        return add(_lift(other), mul(self, _lift(-1.0)))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)

    def backward(self) -> None:
        """Reverse-mode sweep from this scalar; accumulates into .grad fields."""
        if self.shape != ():
            raise BackwardError(f"backward requires a scalar loss, got shape {self.shape}")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    _check_finite(op, data)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros(t.shape, dtype=np.float64)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def grad_or_zeros(t: Tensor) -> np.ndarray:
    """Gradient of t, or zeros when t never appeared on the backward path."""
    return t.grad if t.grad is not None else np.zeros(t.shape, dtype=np.float64)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result("add", data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result("mul", data, (a, b), backward)


def matmul(a: Tensor, b: Tensor, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    """Matrix product over the last two axes; leading axes are batch dims."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-D, got {a.shape} x {b.shape}")
    a_eff = np.swapaxes(a.data, -1, -2) if transpose_a else a.data
    b_eff = np.swapaxes(b.data, -1, -2) if transpose_b else b.data
    if a_eff.shape[-1] != b_eff.shape[-2]:
        raise ShapeError(
            f"matmul: inner dims differ, {a.shape} x {b.shape}"
            f" (transpose_a={transpose_a}, transpose_b={transpose_b})"
        )
    try:
        data = a_eff @ b_eff
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga_eff = g @ np.swapaxes(b_eff, -1, -2)
        gb_eff = np.swapaxes(a_eff, -1, -2) @ g
        ga = np.swapaxes(ga_eff, -1, -2) if transpose_a else ga_eff
        gb = np.swapaxes(gb_eff, -1, -2) if transpose_b else gb_eff
        _accumulate(a, _unbroadcast(ga, a.shape))
        _accumulate(b, _unbroadcast(gb, b.shape))

    return _result("matmul", data, (a, b), backward)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} on axis {axis}") from None
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return _result("concat", data, tuple(tensors), backward)


def tslice(t: Tensor, key) -> Tensor:
    """Basic slicing/int indexing; gradient scatters back into a zero tensor."""
    t = _lift(t)
    data = t.data[key]

    def backward(g):
        if t.requires_grad:
            full = np.zeros(t.shape, dtype=np.float64)
            full[key] = g
            _accumulate(t, full)

    return _result("slice", np.array(data, dtype=np.float64, copy=True), (t,), backward)


def gather_last(t: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry along the last axis per leading position (idx shape = t.shape[:-1])."""
    t = _lift(t)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != t.shape[:-1]:
        raise ShapeError(f"gather_last: index shape {idx.shape} vs tensor {t.shape}")
    data = np.take_along_axis(t.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        if t.requires_grad:
            full = np.zeros(t.shape, dtype=np.float64)
            np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
            _accumulate(t, full)

    return _result("gather", data, (t,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: table (V,E) indexed by an integer array -> ids.shape + (E,)."""
    table = _lift(table)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids out of range [0, {table.shape[0]})")
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            full = np.zeros(table.shape, dtype=np.float64)
            np.add.at(full, ids.ravel(), g.reshape(-1, table.shape[1]))
            _accumulate(table, full)

    return _result("embedding", data, (table,), backward)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    t = _lift(t)
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(t, data * (g - dot))

    return _result("softmax", data, (t,), backward)


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    t = _lift(t)
    shifted = t.data - t.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def backward(g):
        soft = np.exp(data)
        _accumulate(t, g - soft * g.sum(axis=axis, keepdims=True))

    return _result("log_softmax", data, (t,), backward)


def sigmoid(t: Tensor) -> Tensor:
    t = _lift(t)
    # Branch on sign so exp never overflows.
    x = t.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        _accumulate(t, g * data * (1.0 - data))

    return _result("sigmoid", data, (t,), backward)


def tanh(t: Tensor) -> Tensor:
    t = _lift(t)
    data = np.tanh(t.data)

    def backward(g):
        _accumulate(t, g * (1.0 - data * data))

    return _result("tanh", data, (t,), backward)


def relu(t: Tensor) -> Tensor:
    t = _lift(t)
    data = np.maximum(t.data, 0.0)

    def backward(g):
        _accumulate(t, g * (t.data > 0.0))

    return _result("relu", data, (t,), backward)


def layer_norm(t: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    t = _lift(t)
    mu = t.data.mean(axis=-1, keepdims=True)
    var = t.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    data = (t.data - mu) * inv

    def backward(g):
        n = t.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * data).mean(axis=-1, keepdims=True)
        _accumulate(t, inv * (g - gm - data * gy))
        del n

    return _result("layer_norm", data, (t,), backward)


def log(t: Tensor) -> Tensor:
    t = _lift(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(t.data)

    def backward(g):
        _accumulate(t, g / t.data)

    return _result("log", data, (t,), backward)


def tsum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    t = _lift(t)
    data = t.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(t, np.broadcast_to(g, t.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        _accumulate(t, np.broadcast_to(gg, t.shape).copy())

    return _result("sum", data, (t,), backward)


def tmean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    t = _lift(t)
    data = t.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = t.data.size
    else:
        count = t.shape[axis] if isinstance(axis, int) else int(np.prod([t.shape[a] for a in axis]))

    def backward(g):
        if axis is None:
            _accumulate(t, np.broadcast_to(g / count, t.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        _accumulate(t, np.broadcast_to(gg / count, t.shape).copy())

    return _result("mean", data, (t,), backward)


def softplus(t: Tensor) -> Tensor:
    """log(1 + exp(x)), computed as relu(x) + log1p(exp(-|x|)).

    softplus(0) is bit-exactly ln 2 in float64. The fused backward
    g * sigmoid(x) is exact at x = 0 (derivative 1/2); a relu/log/sigmoid
    composition would have a zero subgradient there, and preference tuning
    starts at a margin of exactly zero.
    """
    t = _lift(t)
    x = t.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-np.abs(x)))
        sig = np.where(x >= 0.0, sig, 1.0 - sig)
        _accumulate(t, g * sig)

    return _result("softplus", data, (t,), backward)
