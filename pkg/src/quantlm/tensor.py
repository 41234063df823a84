"""Dense tensors with reverse-mode automatic differentiation.

Values live in numpy arrays, float32 by default; float64 is supported for
high-precision checks (finite-difference gradient verification needs it).
Reductions -- sums, means, normalization statistics, log-sum-exp -- always
accumulate in float64, then cast back to the data dtype, so loss values are
reproducible across platforms at the 1e-6 level. Matrix products are also
evaluated with float64 accumulators for the same reason.

Graphs are built implicitly through parent links. ``backward`` replays them
in reverse construction order, which fixes the summation order and makes
gradients bit-identical for identical inputs.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np
from scipy.special import erf

from .exceptions import (
    MissingDependencyError,
    NumericalError,
    ShapeError,
)

DEFAULT_DTYPE = np.float32

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_enabled = True
_checked = False


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation mode)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def checked(flag: bool = True):
    """Raise NumericalError on any non-finite value produced inside the block."""
    global _checked
    prev, _checked = _checked, flag
    try:
        yield
    finally:
        _checked = prev


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


def _validate_finite(arr, where: str):
    if _checked and not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite value in {where}")


class Tensor:
    """N-dimensional array node in an autodiff graph.

    Leaves are created directly; interior nodes are produced by the ops in
    this module and remember their parents plus a vector-Jacobian callback.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_uid")

    _uid_counter = itertools.count()

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        _validate_finite(self.data, "tensor constructor")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._uid = next(Tensor._uid_counter)

    # -- construction of interior nodes -------------------------------------

    @staticmethod
    def _from_op(data, parents, vjp):
        out = Tensor.__new__(Tensor)
        out.data = data
        _validate_finite(data, "op output")
        out.grad = None
        out._uid = next(Tensor._uid_counter)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def backward(self):
        """Accumulate gradients of this (scalar) tensor into every leaf."""
        grads = _backprop(self)
        for node, g in grads.items():
            if node.requires_grad and not node._parents:
                node.grad = g if node.grad is None else node.grad + g


def _ensure_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def toposort(root: Tensor) -> list[Tensor]:
    """Nodes of the graph below ``root`` in topological (construction) order."""
    seen = set()
    order: list[Tensor] = []
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node._uid in seen:
            continue
        seen.add(node._uid)
        stack.append((node, True))
        for p in node._parents:
            if p._uid not in seen:
                stack.append((p, False))
    return order


def _backprop(loss: Tensor) -> dict[Tensor, np.ndarray]:
    if loss.data.size != 1:
        raise ShapeError("backward requires a scalar loss")
    order = toposort(loss)
    grads: dict[int, np.ndarray] = {
        loss._uid: np.ones_like(loss.data, dtype=loss.data.dtype)
    }
    by_uid = {n._uid: n for n in order}
    for node in reversed(order):
        g = grads.get(node._uid)
        if g is None or node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(parent._uid)
            grads[parent._uid] = pg if acc is None else acc + pg
    return {by_uid[uid]: g for uid, g in grads.items()}


def gradient(loss: Tensor, params) -> list[np.ndarray]:
    """Gradients of a scalar loss with respect to each parameter tensor.

    Pure: does not touch ``.grad``. Raises MissingDependencyError when a
    parameter does not feed into the loss graph.
    """
    params = list(params)
    in_graph = {n._uid for n in toposort(loss)}
    for p in params:
        if p._uid not in in_graph:
            raise MissingDependencyError("parameter is not part of the loss graph")
    grads = _backprop(loss)
    return [grads.get(p, np.zeros_like(p.data)) for p in params]


# -- shape utilities ---------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape`` (float64 accumulation)."""
    if g.shape == shape:
        return g
    dtype = g.dtype
    g64 = g.astype(np.float64, copy=False)
    extra = g64.ndim - len(shape)
    if extra > 0:
        g64 = g64.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, d in enumerate(shape) if d == 1 and g64.shape[i] != 1)
    if squeeze:
        g64 = g64.sum(axis=squeeze, keepdims=True)
    return g64.astype(dtype)


def _result_dtype(*tensors) -> np.dtype:
    return (
        np.float64
        if any(t.data.dtype == np.float64 for t in tensors)
        else np.float32
    )


# -- primitive operations ----------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; 2-D, or 3-D with equal leading batch dimensions."""
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    if a.data.ndim not in (2, 3) or b.data.ndim not in (2, 3):
        raise ShapeError(f"matmul expects 2-D or 3-D operands, got {a.shape} and {b.shape}")
    if a.data.ndim != b.data.ndim:
        raise ShapeError(f"matmul rank mismatch: {a.shape} vs {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    if a.data.ndim == 3 and a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} vs {b.shape}")
    dtype = _result_dtype(a, b)
    a64 = a.data.astype(np.float64, copy=False)
    b64 = b.data.astype(np.float64, copy=False)
    out = (a64 @ b64).astype(dtype)

    def vjp(g):
        g64 = g.astype(np.float64, copy=False)
        ga = (g64 @ np.swapaxes(b64, -1, -2)).astype(a.data.dtype)
        gb = (np.swapaxes(a64, -1, -2) @ g64).astype(b.data.dtype)
        return ga, gb

    return Tensor._from_op(out, (a, b), vjp)


def add(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    try:
        out = (a.data + b.data).astype(_result_dtype(a, b))
    except ValueError as e:
        raise ShapeError(f"add broadcast failure: {a.shape} vs {b.shape}") from e

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._from_op(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    try:
        out = (a.data - b.data).astype(_result_dtype(a, b))
    except ValueError as e:
        raise ShapeError(f"sub broadcast failure: {a.shape} vs {b.shape}") from e

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor._from_op(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _ensure_tensor(a), _ensure_tensor(b)
    try:
        out = (a.data * b.data).astype(_result_dtype(a, b))
    except ValueError as e:
        raise ShapeError(f"mul broadcast failure: {a.shape} vs {b.shape}") from e

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return Tensor._from_op(out, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    a = _ensure_tensor(a)
    c = float(c)
    out = (a.data * c).astype(a.data.dtype)

    def vjp(g):
        return ((g * c).astype(a.data.dtype),)

    return Tensor._from_op(out, (a,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_ensure_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat shape mismatch: {[t.shape for t in tensors]}") from e
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(out, tuple(tensors), vjp)


def reshape(a, shape) -> Tensor:
    a = _ensure_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from e

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return Tensor._from_op(out, (a,), vjp)


def transpose(a, axes=None) -> Tensor:
    a = _ensure_tensor(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inv),)

    return Tensor._from_op(out, (a,), vjp)


def slice_rows(a, start: int, stop: int) -> Tensor:
    """Rows [start, stop) along axis 0."""
    a = _ensure_tensor(a)
    n = a.data.shape[0]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"row slice [{start}, {stop}) out of range for {a.shape}")
    out = a.data[start:stop].copy()

    def vjp(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return Tensor._from_op(out, (a,), vjp)


def take_rows(table, indices) -> Tensor:
    """Row gather (embedding lookup); gradient scatter-adds into the table."""
    table = _ensure_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("take_rows expects a flat index list")
    n = table.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row index out of range [0, {n})")
    out = table.data[idx]

    def vjp(g):
        acc = np.zeros(table.data.shape, dtype=np.float64)
        np.add.at(acc, idx, g.astype(np.float64, copy=False))
        return (acc.astype(table.data.dtype),)

    return Tensor._from_op(out, (table,), vjp)


def gelu(a) -> Tensor:
    """Gaussian error linear unit, exact form x * Phi(x).

    The exact form satisfies gelu(x) - gelu(-x) == x, which the tanh
    approximation breaks at the 1e-3 level.
    """
    a = _ensure_tensor(a)
    x = a.data.astype(np.float64, copy=False)
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out = (x * cdf).astype(a.data.dtype)

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return ((g * (cdf + x * pdf)).astype(a.data.dtype),)

    return Tensor._from_op(out, (a,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    from .exceptions import DegenerateInputError

    x, gain, bias = _ensure_tensor(x), _ensure_tensor(gain), _ensure_tensor(bias)
    d = x.data.shape[-1]
    if d < 2:
        raise DegenerateInputError(f"layer_norm needs at least 2 features, got {d}")
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError("layer_norm gain/bias must match the feature dimension")
    x64 = x.data.astype(np.float64, copy=False)
    mu = x64.mean(axis=-1, keepdims=True)
    var = x64.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mu) * inv
    out = (gain.data * xhat + bias.data).astype(_result_dtype(x, gain, bias))

    def vjp(g):
        g64 = g.astype(np.float64, copy=False)
        dxhat = g64 * gain.data
        # d/dx of (x - mu) / sqrt(var + eps), population statistics
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(g64.ndim - 1))
        dgain = (g64 * xhat).sum(axis=axes) if axes else g64 * xhat
        dbias = g64.sum(axis=axes) if axes else g64
        return (
            dx.astype(x.data.dtype),
            dgain.astype(gain.data.dtype),
            dbias.astype(bias.data.dtype),
        )

    return Tensor._from_op(out, (x, gain, bias), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    a = _ensure_tensor(a)
    x = a.data.astype(np.float64, copy=False)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=axis, keepdims=True)
    out = y.astype(a.data.dtype)

    def vjp(g):
        g64 = g.astype(np.float64, copy=False)
        dot = (g64 * y).sum(axis=axis, keepdims=True)
        return ((y * (g64 - dot)).astype(a.data.dtype),)

    return Tensor._from_op(out, (a,), vjp)


def cross_entropy(logits, targets) -> Tensor:
    """Per-row negative log softmax probability of the target index.

    ``logits`` is (V,) with an integer target, or (N, V) with N targets;
    the result is a scalar or an (N,) vector. Stabilized by max
    subtraction; log-sum-exp runs in float64.
    """
    logits = _ensure_tensor(logits)
    single = logits.data.ndim == 1
    lg = logits.data[None, :] if single else logits.data
    if lg.ndim != 2:
        raise ShapeError(f"cross_entropy expects 1-D or 2-D logits, got {logits.shape}")
    idx = np.asarray(targets, dtype=np.int64).reshape(-1)
    if idx.shape[0] != lg.shape[0]:
        raise ShapeError("one target per logits row required")
    v = lg.shape[1]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError(f"target out of range [0, {v})")
    x = lg.astype(np.float64, copy=False)
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1)) + m[:, 0]
    rows = np.arange(lg.shape[0])
    nll = lse - x[rows, idx]
    out = np.asarray(nll[0] if single else nll).astype(logits.data.dtype)

    def vjp(g):
        p = np.exp(z - (lse - m[:, 0])[:, None])
        p[rows, idx] -= 1.0
        gv = np.asarray(g, dtype=np.float64).reshape(-1, 1)
        d = p * gv
        return ((d[0] if single else d).astype(logits.data.dtype),)

    return Tensor._from_op(out, (logits,), vjp)


def tsum(a) -> Tensor:
    a = _ensure_tensor(a)
    out = np.asarray(a.data.sum(dtype=np.float64)).astype(a.data.dtype)

    def vjp(g):
        return (np.full(a.data.shape, g, dtype=a.data.dtype),)

    return Tensor._from_op(out, (a,), vjp)


def tmean(a) -> Tensor:
    a = _ensure_tensor(a)
    n = a.data.size
    out = np.asarray(a.data.mean(dtype=np.float64)).astype(a.data.dtype)

    def vjp(g):
        return (np.full(a.data.shape, g / n, dtype=a.data.dtype),)

    return Tensor._from_op(out, (a,), vjp)


# -- optimizer helpers ---------------------------------------------------------


def sgd_update(param: Tensor, grad, lr: float) -> Tensor:
    """Pure single-parameter descent step: param - lr * grad."""
    g = grad.data if isinstance(grad, Tensor) else np.asarray(grad)
    if g.shape != param.data.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match parameter {param.data.shape}")
    return Tensor(param.data - lr * g.astype(param.data.dtype), dtype=param.data.dtype)


def global_norm(grads) -> float:
    total = 0.0
    for g in grads:
        arr = g.data if isinstance(g, Tensor) else np.asarray(g)
        total += float(np.sum(arr.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_by_global_norm(grads, max_norm: float):
    """Scale a gradient set so its joint L2 norm is at most ``max_norm``.

    Returns (clipped grads, applied factor).
    """
    norm = global_norm(grads)
    if max_norm <= 0 or norm <= max_norm:
        return list(grads), 1.0
    factor = max_norm / norm
    out = []
    for g in grads:
        arr = g.data if isinstance(g, Tensor) else np.asarray(g)
        out.append((arr * factor).astype(arr.dtype))
    return out, factor


def sgd_step(params, lr: float, clip_norm: float = 0.0) -> float:
    """In-place descent over tensors with accumulated ``.grad``.

    Applies global-norm clipping first when clip_norm > 0; returns the
    pre-clip gradient norm. Parameters without gradients are skipped.
    """
    params = [p for p in params if p.grad is not None]
    grads = [p.grad for p in params]
    norm = global_norm(grads)
    if clip_norm > 0 and norm > clip_norm:
        factor = clip_norm / norm
        grads = [(g * factor).astype(g.dtype) for g in grads]
    for p, g in zip(params, grads):
        p.data = (p.data - lr * g).astype(p.data.dtype)
    return norm
