"""Dense tensor math with reverse-mode gradients.

Values live in contiguous row-major numpy arrays. ``Var`` wraps one array
together with the bookkeeping for the backward pass: the parent nodes and
a closure that routes the upstream gradient to them. Layer primitives
(affine, gelu, layer_norm, dropout, adaptive max pooling) carry
hand-derived backward rules; everything is verified against central
finite differences via :func:`finite_diff_check`.

The backward pass walks nodes in reverse creation order, which is a valid
topological order because parents are always created before children.
Gradient accumulation order is therefore fixed, giving bit-reproducible
gradients for a fixed graph build.
"""

import itertools

import numpy as np
from scipy.special import erf

from .errors import DimensionError, NumericalError, ParameterError, UsageError

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327

_check_finite = False


def set_check_finite(flag: bool) -> None:
    """When enabled, every op output is checked for NaN/Inf (slow)."""
    global _check_finite
    _check_finite = bool(flag)


class Var:
    """One node of the computation graph: a value plus its gradient slot."""

    __slots__ = ("value", "grad", "_parents", "_backward", "_id")
    _ids = itertools.count()

    def __init__(self, value, _parents=(), _backward=None):
        self.value = np.asarray(value)
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self._id = next(Var._ids)
        if _check_finite and not np.all(np.isfinite(self.value)):
            raise NumericalError("non-finite value produced by forward pass")

    @property
    def shape(self):
        return self.value.shape

    def backward(self) -> None:
        """Seed d(self)/d(self)=1 and propagate to every reachable node."""
        reverse_pass(self)

    def grad_or_zero(self) -> np.ndarray:
        return self.grad if self.grad is not None else np.zeros_like(self.value)

    # -- arithmetic sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -as_var(other, like=self))

    def __rsub__(self, other):
        return add(as_var(other, like=self), -self)

    def __truediv__(self, other):
        return div(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, id={self._id})"


def as_var(x, like: Var | None = None) -> Var:
    """Lift an array or scalar to a leaf Var (no-op for Vars)."""
    if isinstance(x, Var):
        return x
    dt = like.value.dtype if like is not None else None
    return Var(np.asarray(x, dtype=dt))


def reverse_pass(loss: Var) -> None:
    """Backward pass from a scalar loss.

    Visits each reachable node exactly once, in reverse creation order;
    gradients accumulate by summation over all paths.
    """
    if loss.value.ndim != 0:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.value.shape}")
    nodes: dict[int, Var] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id not in nodes:
            nodes[node._id] = node
            stack.extend(node._parents)
    loss.grad = np.ones((), dtype=loss.value.dtype)
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            if _check_finite:
                for p in node._parents:
                    if p.grad is not None and not np.all(np.isfinite(p.grad)):
                        raise NumericalError("non-finite gradient in backward pass")


def _accum(node: Var, g: np.ndarray) -> None:
    node.grad = g if node.grad is None else node.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise and reduction primitives --------------------------------


def add(a, b) -> Var:
    a = as_var(a)
    b = as_var(b, like=a)
    out_val = a.value + b.value

    def backward(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    return Var(out_val, (a, b), backward)


def mul(a, b) -> Var:
    a = as_var(a)
    b = as_var(b, like=a)
    out_val = a.value * b.value

    def backward(g):
        _accum(a, _unbroadcast(g * b.value, a.value.shape))
        _accum(b, _unbroadcast(g * a.value, b.value.shape))

    return Var(out_val, (a, b), backward)


def div(a, b) -> Var:
    a = as_var(a)
    b = as_var(b, like=a)
    out_val = a.value / b.value

    def backward(g):
        _accum(a, _unbroadcast(g / b.value, a.value.shape))
        _accum(b, _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    return Var(out_val, (a, b), backward)


def power(a, exponent: float) -> Var:
    a = as_var(a)
    e = float(exponent)
    out_val = a.value**e

    def backward(g):
        _accum(a, g * e * a.value ** (e - 1.0))

    return Var(out_val, (a,), backward)


def vexp(a) -> Var:
    a = as_var(a)
    out_val = np.exp(a.value)

    def backward(g):
        _accum(a, g * out_val)

    return Var(out_val, (a,), backward)


def vlog(a) -> Var:
    a = as_var(a)
    out_val = np.log(a.value)

    def backward(g):
        _accum(a, g / a.value)

    return Var(out_val, (a,), backward)


def vsqrt(a) -> Var:
    a = as_var(a)
    out_val = np.sqrt(a.value)

    def backward(g):
        _accum(a, g * (0.5 / out_val))

    return Var(out_val, (a,), backward)


def vsum(a, axis: int | None = None, keepdims: bool = False) -> Var:
    a = as_var(a)
    out_val = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.value.shape).copy())

    return Var(out_val, (a,), backward)


def mean_all(a) -> Var:
    """Mean over every element, the reduction used by all MSE-style losses."""
    a = as_var(a)
    n = a.value.size
    out_val = np.asarray(a.value.mean(), dtype=a.value.dtype)

    def backward(g):
        _accum(a, np.full(a.value.shape, g / n, dtype=a.value.dtype))

    return Var(out_val, (a,), backward)


def reshape(a, shape) -> Var:
    a = as_var(a)
    shape = tuple(shape)
    out_val = a.value.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.value.shape))

    return Var(out_val, (a,), backward)


def transpose(a) -> Var:
    a = as_var(a)
    if a.value.ndim != 2:
        raise DimensionError("transpose expects a 2-D array")
    out_val = a.value.T

    def backward(g):
        _accum(a, g.T)

    return Var(out_val, (a,), backward)


def matmul(a, b) -> Var:
    a = as_var(a)
    b = as_var(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(
            f"matmul inner dims disagree: {a.value.shape} @ {b.value.shape}"
        )
    out_val = a.value @ b.value

    def backward(g):
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    return Var(out_val, (a, b), backward)


def logsumexp(a, axis: int = -1, keepdims: bool = True) -> Var:
    """Row-stabilized log-sum-exp; backward is the softmax."""
    a = as_var(a)
    m = a.value.max(axis=axis, keepdims=True)
    shifted = np.exp(a.value - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out_val = np.log(total) + m
    soft = shifted / total
    if not keepdims:
        out_val = np.squeeze(out_val, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, g * soft)

    return Var(out_val, (a,), backward)


def detach(a) -> Var:
    """A new leaf sharing the value; gradients stop here."""
    a = as_var(a)
    return Var(a.value)


# -- layer primitives -----------------------------------------------------


def affine(x, w, b) -> Var:
    """x[n,d_in] @ w[d_in,d_out] + b[d_out]."""
    x = as_var(x)
    w = as_var(w)
    b = as_var(b)
    if x.value.ndim != 2 or w.value.ndim != 2:
        raise DimensionError("affine expects 2-D input and weight")
    if x.value.shape[1] != w.value.shape[0] or w.value.shape[1] != b.value.shape[-1]:
        raise DimensionError(
            f"affine shapes disagree: x{x.value.shape} w{w.value.shape} b{b.value.shape}"
        )
    out_val = x.value @ w.value + b.value

    def backward(g):
        _accum(x, g @ w.value.T)
        _accum(w, x.value.T @ g)
        _accum(b, _unbroadcast(g, b.value.shape))

    return Var(out_val, (x, w, b), backward)


def gelu(x) -> Var:
    """Exact Gaussian-CDF form: x * Phi(x), Phi via erf (no tanh approximation)."""
    x = as_var(x)
    cdf = 0.5 * (1.0 + erf(x.value * _INV_SQRT2))
    out_val = x.value * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.value * x.value) * _INV_SQRT2PI
        _accum(x, g * (cdf + x.value * pdf))

    return Var(out_val, (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Var:
    """Per-row standardization over the last axis, scaled by gamma, shifted by beta."""
    x = as_var(x)
    gamma = as_var(gamma)
    beta = as_var(beta)
    d = x.value.shape[-1]
    if d < 1:
        raise DimensionError("layer_norm needs at least one feature")
    mu = x.value.mean(axis=-1, keepdims=True)
    centered = x.value - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out_val = gamma.value * xhat + beta.value

    def backward(g):
        _accum(beta, _unbroadcast(g, beta.value.shape))
        _accum(gamma, _unbroadcast(g * xhat, gamma.value.shape))
        gx = g * gamma.value
        gx_mean = gx.mean(axis=-1, keepdims=True)
        gxxhat_mean = (gx * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv_std * (gx - gx_mean - xhat * gxxhat_mean))

    return Var(out_val, (x, gamma, beta), backward)


def dropout(x, p: float, training: bool, rng: np.random.Generator | None = None) -> Var:
    """Zero each element with probability p and rescale survivors by 1/(1-p).

    Identity at inference or p=0. Masks are a pure function of the
    generator state, so identical seeds give bit-identical masks.
    """
    x = as_var(x)
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode requires an rng")
    keep = (rng.random(x.value.shape) >= p).astype(x.value.dtype)
    scaled_mask = keep / x.value.dtype.type(1.0 - p)
    out_val = x.value * scaled_mask

    def backward(g):
        _accum(x, g * scaled_mask)

    return Var(out_val, (x,), backward)


# -- adaptive max pooling ---------------------------------------------------


def pool_windows(length: int, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Window bounds for adaptive pooling: start=floor(i*L/m), end=ceil((i+1)*L/m)."""
    if m < 1 or m > length:
        raise ParameterError(f"pooled size must satisfy 1 <= m <= L, got m={m}, L={length}")
    i = np.arange(m, dtype=np.int64)
    starts = (i * length) // m
    ends = -((-(i + 1) * length) // m)
    return starts, ends


def _max_pool_forward(values: np.ndarray, m: int):
    """Vectorized window max over the last axis; returns output and argmax indices.

    Ties resolve to the lowest index (np.argmax convention).
    """
    squeeze = values.ndim == 1
    v2 = values[None, :] if squeeze else values
    if v2.ndim != 2:
        raise DimensionError("adaptive_max_pool expects a vector or a batch of vectors")
    n, length = v2.shape
    starts, ends = pool_windows(length, m)
    sizes = ends - starts
    out = np.empty((n, m), dtype=v2.dtype)
    arg = np.empty((n, m), dtype=np.int64)
    for size in np.unique(sizes):
        sel = np.nonzero(sizes == size)[0]
        idx = starts[sel][:, None] + np.arange(size)[None, :]
        vals = v2[:, idx]
        a = np.argmax(vals, axis=2)
        out[:, sel] = np.take_along_axis(vals, a[:, :, None], axis=2)[:, :, 0]
        arg[:, sel] = starts[sel][None, :] + a
    if squeeze:
        return out[0], arg[0], squeeze
    return out, arg, squeeze


def adaptive_max_pool_array(values: np.ndarray, m: int) -> np.ndarray:
    """Forward-only pooling for plain arrays (data-loading path)."""
    out, _, _ = _max_pool_forward(np.asarray(values), m)
    return out


def adaptive_max_pool(v, m: int) -> Var:
    """Window max pooling to a fixed output size, with gradient routing.

    Each output window contributes its full upstream gradient to exactly
    one input position (the window argmax; first index on ties).
    """
    v = as_var(v)
    out_val, arg, squeeze = _max_pool_forward(v.value, m)

    def backward(g):
        gv = np.zeros_like(v.value)
        if squeeze:
            np.add.at(gv, arg, g)
        else:
            rows = np.arange(v.value.shape[0])[:, None]
            np.add.at(gv, (rows, arg), g)
        _accum(v, gv)

    return Var(out_val, (v,), backward)


# -- gradient verification --------------------------------------------------


def finite_diff_check(
    f,
    params: list[Var],
    eps: float = 1e-5,
    max_coords_per_param: int | None = 24,
    seed: int = 0,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``f`` must be a deterministic zero-argument callable returning a scalar
    Var built from ``params`` (dropout disabled or its rng fixed). The
    reference setting is eps=1e-5 at 64-bit precision. Coordinates are
    subsampled per parameter when ``max_coords_per_param`` is set.

    The per-coordinate error is |a - n| / max(|a|, |n|, floor) with a floor
    at 1e-3 of the largest gradient magnitude, so coordinates far below the
    dominant gradient scale are judged against that scale instead of
    drowning in finite-difference cancellation noise.
    """
    for p in params:
        p.grad = None
    out = f()
    reverse_pass(out)
    analytic = [p.grad_or_zero().copy() for p in params]
    rng = np.random.default_rng(seed)
    pairs: list[tuple[float, float]] = []
    for p, g in zip(params, analytic):
        flat = p.value.reshape(-1)
        g_flat = g.reshape(-1)
        size = flat.size
        if size == 0:
            continue
        if max_coords_per_param is not None and size > max_coords_per_param:
            coords = np.sort(rng.choice(size, size=max_coords_per_param, replace=False))
        else:
            coords = np.arange(size)
        for j in coords:
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = float(f().value)
            flat[j] = orig - eps
            f_minus = float(f().value)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            pairs.append((float(g_flat[j]), numeric))
    if not pairs:
        return 0.0
    scale = max(max(abs(a), abs(n)) for a, n in pairs)
    floor = max(1e-3 * scale, 1e-12)
    return max(abs(a - n) / max(abs(a), abs(n), floor) for a, n in pairs)
