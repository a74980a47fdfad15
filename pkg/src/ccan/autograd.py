"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small kernel surface, just enough for attention stacks:
2-D matrix products, row-wise softmax and layer norm, GELU/sigmoid/log
nonlinearities, row pooling, and row/column stacking. The only implicit
broadcast is a 1-D bias added over the rows of a matrix; every other
shape mismatch is an error.

Tensors are float32 by default. Entire graphs may instead run in float64
(pass float64 arrays in), which is how the finite-difference oracle in
``grad_check`` reaches full precision.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import NumericError, ShapeError, UsageError

_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class OpProbe:
    """Accumulates multiply-accumulate counts and tensor allocation bytes."""

    __slots__ = ("macs", "tensor_bytes")

    def __init__(self):
        self.macs = 0
        self.tensor_bytes = 0


_probe: OpProbe | None = None
_grad_enabled: bool = True


@contextmanager
def op_probe():
    """Count matmul MACs and allocated tensor bytes inside the block."""
    global _probe
    prev, _probe = _probe, OpProbe()
    try:
        yield _probe
    finally:
        _probe = prev


@contextmanager
def no_grad():
    """Skip graph construction inside the block (pure inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A real-valued array, optionally a node in a differentiation graph.

    Immutable after construction except for the ``grad`` accumulator;
    ``grad``, when present, always matches ``data`` in shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        # float64 is opt-in: only explicit float64 arrays/scalars keep it
        if isinstance(data, (np.ndarray, np.generic)) and data.dtype in _ALLOWED_DTYPES:
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        if _probe is not None:
            _probe.tensor_bytes += arr.nbytes

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _check_same_dtype(a, b, op):
    if a.data.dtype != b.data.dtype:
        raise UsageError(f"{op}: mixed dtypes {a.data.dtype} and {b.data.dtype}")


def _accum(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make_node(out, parents, backward):
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives


def add(a, b):
    """a + b for identical shapes, or matrix + 1-D bias broadcast over rows."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_same_dtype(a, b, "add")
    bias_add = a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]
    if not bias_add and a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} do not match")
    out = Tensor(a.data + b.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g.sum(axis=0) if bias_add else g)

    return _make_node(out, (a, b), backward)


def sub(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_same_dtype(a, b, "sub")
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub: shapes {a.data.shape} and {b.data.shape} do not match")
    out = Tensor(a.data - b.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g)

    return _make_node(out, (a, b), backward)


def neg(a):
    out = Tensor(-a.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, -g)

    return _make_node(out, (a,), backward)


def mul(a, b):
    """Elementwise product; shapes must match exactly."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_same_dtype(a, b, "mul")
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} do not match")
    out = Tensor(a.data * b.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _make_node(out, (a, b), backward)


def scale(a, s):
    """a * s for a python scalar s."""
    s = float(s)
    out = Tensor(a.data * np.asarray(s, dtype=a.data.dtype))

    def backward(g):
        if a.requires_grad:
            _accum(a, g * s)

    return _make_node(out, (a,), backward)


def matmul(a, b):
    """Standard 2-D matrix product, differentiable w.r.t. both inputs."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_same_dtype(a, b, "matmul")
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner extents differ for shapes {a.data.shape} and {b.data.shape}")
    if _probe is not None:
        m, k = a.data.shape
        n = b.data.shape[1]
        _probe.macs += m * k * n
    out = Tensor(a.data @ b.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make_node(out, (a, b), backward)


def transpose(a):
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-D tensor, got shape {a.data.shape}")
    out = Tensor(a.data.T.copy())

    def backward(g):
        if a.requires_grad:
            _accum(a, g.T)

    return _make_node(out, (a,), backward)


def sum_all(a):
    """Sum of every entry, as a scalar tensor."""
    out = Tensor(a.data.sum(dtype=a.data.dtype))

    def backward(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype))

    return _make_node(out, (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def softmax(x, axis=-1):
    """Row-stochastic softmax along ``axis``, stabilized by max subtraction."""
    if not np.isfinite(x.data).all():
        raise NumericError("softmax: input contains NaN or infinite entries")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backward(g):
        if x.requires_grad:
            inner = (g * y).sum(axis=axis, keepdims=True)
            _accum(x, y * (g - inner))

    return _make_node(out, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize each row of a matrix to zero mean / unit variance, then affine."""
    if x.data.ndim != 2 or x.data.shape[1] < 1:
        raise ShapeError(f"layer_norm: expected a 2-D tensor with nonempty rows, got {x.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def backward(g):
        if beta.requires_grad:
            _accum(beta, g.sum(axis=0))
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            term1 = gx.mean(axis=-1, keepdims=True)
            term2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (gx - term1 - xhat * term2))

    return _make_node(out, (x, gamma, beta), backward)


def gelu(x):
    """Exact (erf-based) Gaussian error linear unit."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor((x.data * cdf).astype(x.data.dtype))

    def backward(g):
        if x.requires_grad:
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
            _accum(x, (g * (cdf + x.data * pdf)).astype(x.data.dtype))

    return _make_node(out, (x,), backward)


def sigmoid(x):
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(y.astype(d.dtype))

    def backward(g):
        if x.requires_grad:
            _accum(x, (g * y * (1.0 - y)).astype(d.dtype))

    return _make_node(out, (x,), backward)


def log(x):
    out = Tensor(np.log(x.data))

    def backward(g):
        if x.requires_grad:
            _accum(x, g / x.data)

    return _make_node(out, (x,), backward)


def clip(x, lo, hi):
    """Clamp to [lo, hi]; gradient passes through wherever lo <= x <= hi."""
    out = Tensor(np.clip(x.data, lo, hi))
    mask = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        if x.requires_grad:
            _accum(x, g * mask)

    return _make_node(out, (x,), backward)


# ---------------------------------------------------------------------------
# row/column structure


def concat_rows(parts):
    parts = list(parts)
    width = parts[0].data.shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[1] != width:
            raise ShapeError(f"concat_rows: inconsistent widths {[q.data.shape for q in parts]}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accum(p, g[lo:hi])

    return _make_node(out, tuple(parts), backward)


def slice_rows(x, start, stop):
    out = Tensor(x.data[start:stop].copy())

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[start:stop] = g
            _accum(x, gx)

    return _make_node(out, (x,), backward)


def concat_cols(parts):
    parts = list(parts)
    height = parts[0].data.shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[0] != height:
            raise ShapeError(f"concat_cols: inconsistent heights {[q.data.shape for q in parts]}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    offsets = np.cumsum([0] + [p.data.shape[1] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accum(p, g[:, lo:hi])

    return _make_node(out, tuple(parts), backward)


def slice_cols(x, start, stop):
    out = Tensor(x.data[:, start:stop].copy())

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[:, start:stop] = g
            _accum(x, gx)

    return _make_node(out, (x,), backward)


def avg_pool_rows(x, group):
    """Mean over each group of ``group`` consecutive rows."""
    m = x.data.shape[0]
    if x.data.ndim != 2 or group < 1 or m % group != 0:
        raise ShapeError(f"avg_pool_rows: {m} rows not divisible into groups of {group}")
    y = x.data.reshape(m // group, group, x.data.shape[1]).mean(axis=1)
    out = Tensor(y.astype(x.data.dtype))

    def backward(g):
        if x.requires_grad:
            _accum(x, np.repeat(g, group, axis=0) / group)

    return _make_node(out, (x,), backward)


def mean_rows(x):
    """Column-wise mean over all rows, kept 2-D with a single row."""
    return avg_pool_rows(x, x.data.shape[0])


def max_rows(x):
    """Column-wise max over all rows; gradient flows to the first argmax."""
    if x.data.ndim != 2 or x.data.shape[0] < 1:
        raise ShapeError(f"max_rows: expected a nonempty 2-D tensor, got {x.data.shape}")
    idx = x.data.argmax(axis=0)
    out = Tensor(x.data[idx, np.arange(x.data.shape[1])][None, :].copy())

    def backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, (idx, np.arange(x.data.shape[1])), g[0])
            _accum(x, gx)

    return _make_node(out, (x,), backward)


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def backward(loss):
    """Populate grads of every reachable tensor with requires_grad.

    Repeated calls accumulate into existing grads; call ``zero_grad`` on
    parameters between passes.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward: loss must be a scalar, got shape {loss.data.shape}")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    _accum(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # interior grads are scratch space; only leaves keep theirs
    for node in topo:
        if node._backward is not None:
            node.grad = None


def zero_grad(params):
    for p in params:
        p.zero_grad()


@dataclass
class GradReport:
    """Outcome of an analytic-vs-finite-difference comparison."""

    max_abs_err: float
    max_rel_err: float
    per_parameter: list = field(default_factory=list)


def grad_check(f, params, eps=1e-3, max_coords_per_param=None, rng=None):
    """Compare analytic gradients of ``f()`` against central finite differences.

    ``f`` is a zero-argument function returning a scalar tensor and must be
    deterministic (disable dropout); ``params`` is a list of (name, Tensor)
    leaves it closes over.  For large parameters, ``max_coords_per_param``
    limits the check to a random coordinate subset.  Run the model in
    float64 for full oracle precision.
    """
    if eps <= 0:
        raise UsageError("grad_check: eps must be positive")
    rng = rng or np.random.default_rng(0)

    first = f()
    if abs(f().item() - first.item()) > 0:
        raise UsageError("grad_check: f is not deterministic; disable stochastic layers")

    zero_grad([t for _, t in params])
    backward(f())
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in params}

    max_abs = 0.0
    max_rel = 0.0
    per_parameter = []
    for name, t in params:
        n = t.data.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = np.arange(n)
        p_abs = 0.0
        p_rel = 0.0
        grad_flat = analytic[name].reshape(-1)
        for i in coords:
            idx = np.unravel_index(i, t.data.shape)
            orig = t.data[idx]
            t.data[idx] = orig + eps
            f_plus = f().item()
            t.data[idx] = orig - eps
            f_minus = f().item()
            t.data[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(grad_flat[i])
            abs_err = abs(a - numeric)
            rel_err = abs_err / max(abs(a), abs(numeric), 1e-8)
            p_abs = max(p_abs, abs_err)
            p_rel = max(p_rel, rel_err)
        per_parameter.append((name, p_abs, p_rel))
        max_abs = max(max_abs, p_abs)
        max_rel = max(max_rel, p_rel)
    return GradReport(max_abs_err=max_abs, max_rel_err=max_rel, per_parameter=per_parameter)
