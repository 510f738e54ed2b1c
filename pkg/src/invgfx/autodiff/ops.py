"""Differentiable operations.

Every function takes tensors (or values liftable to constant tensors),
computes the forward value eagerly, and records a backward closure on the
active tape when any input is tracked. Broadcasting is deliberately
restricted to scalar-vs-tensor and equal shapes.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np

from .. import kernels
from ..errors import ConfigError, DimensionError, DomainError, UsageError
from .tensor import Tensor, active_tape, lift


class margin_monitor:
    """Context manager recording distances from gradient kinks.

    Finite-difference validation is only meaningful away from the kinks of
    abs / leaky_relu / clip and away from epsilon-dominated normalization;
    instance generators run a probe forward under this monitor and resample
    when any margin is too small.
    """

    _active = None

    def __init__(self):
        self.min_kink = np.inf
        self.min_norm_var = np.inf

    def __enter__(self):
        margin_monitor._active = self
        return self

    def __exit__(self, exc_type, exc, tb):
        margin_monitor._active = None

    @classmethod
    def note_kink(cls, distances) -> None:
        if cls._active is not None and distances.size:
            cls._active.min_kink = min(cls._active.min_kink,
                                       float(np.min(distances)))

    @classmethod
    def note_norm_var(cls, var) -> None:
        if cls._active is not None:
            cls._active.min_norm_var = min(cls._active.min_norm_var,
                                           float(np.min(var)))


def _apply(op: str, out_data: np.ndarray, pairs) -> Tensor:
    """Create the output tensor; record (tensor, vjp) pairs if tape active."""
    out = Tensor(out_data)
    tape = active_tape()
    if tape is None:
        return out
    for t, _ in pairs:
        if t.tape is not None and t.tape is not tape:
            raise UsageError(
                "operand of %s belongs to another tape; detach() it first" % op)
    tracked = [(t, fn) for t, fn in pairs if fn is not None and tape.is_tracked(t)]
    if not tracked:
        return out

    def backward_fn(g):
        return [(t, fn(g)) for t, fn in tracked]

    tape.record(op, out, [t for t, _ in pairs], backward_fn)
    return out


def _binary_setup(op: str, a: Tensor, b: Tensor):
    """Shape legality + per-side gradient reducers for restricted broadcast."""
    if a.shape == b.shape:
        return lambda g: g, lambda g: g
    if a.ndim == 0:
        return lambda g: np.sum(g), lambda g: g
    if b.ndim == 0:
        return lambda g: g, lambda g: np.sum(g)
    raise DimensionError(
        "%s: shapes %s and %s are neither equal nor scalar-vs-tensor"
        % (op, a.shape, b.shape)
    )


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    ra, rb = _binary_setup("add", a, b)
    return _apply("add", a.data + b.data, [(a, ra), (b, rb)])


def sub(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    ra, rb = _binary_setup("sub", a, b)
    return _apply("sub", a.data - b.data, [(a, ra), (b, lambda g: -rb(g))])


def mul(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    ra, rb = _binary_setup("mul", a, b)
    ad, bd = a.data, b.data
    return _apply("mul", ad * bd,
                  [(a, lambda g: ra(g * bd)), (b, lambda g: rb(g * ad))])


def div(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    if np.any(b.data == 0.0):
        raise DomainError("division by zero")
    ra, rb = _binary_setup("div", a, b)
    ad, bd = a.data, b.data
    return _apply("div", ad / bd,
                  [(a, lambda g: ra(g / bd)), (b, lambda g: rb(-g * ad / (bd * bd)))])


def neg(a) -> Tensor:
    a = lift(a)
    return _apply("neg", -a.data, [(a, lambda g: -g)])


def log(a) -> Tensor:
    a = lift(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log requires strictly positive inputs")
    ad = a.data
    return _apply("log", np.log(ad), [(a, lambda g: g / ad)])


def exp(a) -> Tensor:
    a = lift(a)
    out = np.exp(a.data)
    return _apply("exp", out, [(a, lambda g: g * out)])


def sigmoid(a) -> Tensor:
    a = lift(a)
    ad = a.data
    # exp of a non-positive argument only: overflow-free for any input.
    z = np.exp(-np.abs(ad))
    out = np.where(ad >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _apply("sigmoid", out, [(a, lambda g: g * out * (1.0 - out))])


def tanh(a) -> Tensor:
    a = lift(a)
    out = np.tanh(a.data)
    return _apply("tanh", out, [(a, lambda g: g * (1.0 - out * out))])


def sin(a) -> Tensor:
    a = lift(a)
    ad = a.data
    return _apply("sin", np.sin(ad), [(a, lambda g: g * np.cos(ad))])


def cos(a) -> Tensor:
    a = lift(a)
    ad = a.data
    return _apply("cos", np.cos(ad), [(a, lambda g: -g * np.sin(ad))])


def sqrt(a) -> Tensor:
    a = lift(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt requires nonnegative inputs")
    out = np.sqrt(a.data)
    return _apply("sqrt", out, [(a, lambda g: g * 0.5 / out)])


def square(a) -> Tensor:
    a = lift(a)
    ad = a.data
    return _apply("square", ad * ad, [(a, lambda g: g * 2.0 * ad)])


def absolute(a) -> Tensor:
    a = lift(a)
    ad = a.data
    margin_monitor.note_kink(np.abs(ad))
    return _apply("abs", np.abs(ad), [(a, lambda g: g * np.sign(ad))])


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = lift(a)
    ad = a.data
    margin_monitor.note_kink(np.abs(ad))
    out = np.where(ad > 0.0, ad, slope * ad)
    return _apply("leaky_relu", out,
                  [(a, lambda g: g * np.where(ad > 0.0, 1.0, slope))])


def relu(a) -> Tensor:
    return leaky_relu(a, slope=0.0)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values into [lo, hi]; gradient passes only strictly inside."""
    a = lift(a)
    ad = a.data
    margin_monitor.note_kink(np.minimum(np.abs(ad - lo), np.abs(ad - hi)))
    inside = (ad > lo) & (ad < hi)
    return _apply("clip", np.clip(ad, lo, hi), [(a, lambda g: g * inside)])


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div, "log": log, "exp": exp,
    "sigmoid": sigmoid, "leaky_relu": leaky_relu, "square": square,
}


def elementwise(op: str, a, b=None, slope: float = 0.2) -> Tensor:
    """Dispatch-by-name view of the pointwise operator family."""
    if op not in _ELEMENTWISE:
        raise ConfigError("unknown elementwise op %r" % op)
    if op == "leaky_relu":
        return leaky_relu(a, slope=slope)
    fn = _ELEMENTWISE[op]
    return fn(a, b) if b is not None else fn(a)


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(a: Tensor, axes):
    if axes is None:
        return tuple(range(a.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(ax) for ax in axes)
    for ax in axes:
        if not (0 <= ax < a.ndim):
            raise DimensionError("axis %d out of range for shape %s" % (ax, a.shape))
    if len(set(axes)) != len(axes):
        raise DimensionError("duplicate reduction axes %s" % (axes,))
    return axes


def _expand(g: np.ndarray, shape, axes) -> np.ndarray:
    for ax in sorted(axes):
        g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def _reduce_guard(a: Tensor):
    if a.size == 0:
        raise DomainError("reduction over an empty tensor")


def reduce_sum(a, axes=None) -> Tensor:
    a = lift(a)
    _reduce_guard(a)
    axes = _norm_axes(a, axes)
    shape = a.shape
    return _apply("sum", np.sum(a.data, axis=axes),
                  [(a, lambda g: _expand(g, shape, axes).copy())])


def reduce_mean(a, axes=None) -> Tensor:
    a = lift(a)
    _reduce_guard(a)
    axes = _norm_axes(a, axes)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    shape = a.shape
    return _apply("mean", np.sum(a.data, axis=axes) / n,
                  [(a, lambda g: _expand(g, shape, axes) / n)])


def l1_norm(a, axes=None) -> Tensor:
    a = lift(a)
    _reduce_guard(a)
    axes = _norm_axes(a, axes)
    ad = a.data
    shape = a.shape
    return _apply("l1_norm", np.sum(np.abs(ad), axis=axes),
                  [(a, lambda g: _expand(g, shape, axes) * np.sign(ad))])


def l2_norm(a, axes=None) -> Tensor:
    """Root-sum-square. Subgradient 0 is used at an exactly-zero input."""
    a = lift(a)
    _reduce_guard(a)
    axes = _norm_axes(a, axes)
    ad = a.data
    shape = a.shape
    out = np.sqrt(np.sum(ad * ad, axis=axes))

    def vjp(g):
        denom = _expand(out, shape, axes)
        ge = _expand(g, shape, axes)
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.where(denom > 0.0, ad / np.where(denom > 0.0, denom, 1.0), 0.0)
        return ge * r

    return _apply("l2_norm", out, [(a, vjp)])


_REDUCE = {"sum": reduce_sum, "mean": reduce_mean, "l1_norm": l1_norm, "l2_norm": l2_norm}


def reduce(op: str, a, axes=None) -> Tensor:
    if op not in _REDUCE:
        raise ConfigError("unknown reduction %r" % op)
    return _REDUCE[op](a, axes)


# ---------------------------------------------------------------------------
# structure


def reshape(a, shape) -> Tensor:
    a = lift(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError("cannot reshape %s to %s" % (a.shape, shape))
    old = a.shape
    return _apply("reshape", a.data.reshape(shape),
                  [(a, lambda g: g.reshape(old))])


def transpose(a, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError("invalid permutation %s for ndim %d" % (axes, a.ndim))
    inv = np.argsort(axes)
    return _apply("transpose", np.transpose(a.data, axes),
                  [(a, lambda g: np.transpose(g, inv))])


def concat(parts, axis: int = 0) -> Tensor:
    parts = [lift(p) for p in parts]
    if not parts:
        raise DimensionError("concat of zero tensors")
    nd = parts[0].ndim
    if not (0 <= axis < nd):
        raise DimensionError("concat axis %d out of range" % axis)
    for p in parts[1:]:
        if p.ndim != nd:
            raise DimensionError("concat rank mismatch")
        for ax in range(nd):
            if ax != axis and p.shape[ax] != parts[0].shape[ax]:
                raise DimensionError("concat shape mismatch at axis %d" % ax)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * nd
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl].copy()

    return _apply("concat", out, [(p, make_vjp(i)) for i, p in enumerate(parts)])


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = lift(a)
    if not (0 <= axis < a.ndim):
        raise DimensionError("slice axis %d out of range" % axis)
    if not (0 <= start < stop <= a.shape[axis]):
        raise DimensionError("slice [%d:%d) invalid for extent %d"
                             % (start, stop, a.shape[axis]))
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape, dtype=np.float64)
        out[sl] = g
        return out

    return _apply("slice", a.data[sl].copy(), [(a, vjp)])


def flatten_column(a) -> Tensor:
    """Reshape to a (n, 1) column vector."""
    a = lift(a)
    return reshape(a, (a.size, 1))


def stack_mean(parts) -> Tensor:
    """Mean of a list of scalar tensors (batch-averaged losses)."""
    cols = [reshape(p, (1,)) for p in parts]
    return reduce_mean(concat(cols, axis=0))


# ---------------------------------------------------------------------------
# linear algebra and nn primitives


def matmul(a, b) -> Tensor:
    a, b = lift(a), lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul expects 2-D operands, got %s @ %s"
                             % (a.shape, b.shape))
    if a.shape[1] != b.shape[0]:
        raise DimensionError("matmul inner dims disagree: %s @ %s"
                             % (a.shape, b.shape))
    ad, bd = a.data, b.data
    return _apply("matmul", ad @ bd,
                  [(a, lambda g: g @ bd.T), (b, lambda g: ad.T @ g)])


def bias_add(x, b) -> Tensor:
    """Add a length-c bias along axis 0 of x (c, ...)."""
    x, b = lift(x), lift(b)
    if b.ndim != 1 or x.ndim < 1 or x.shape[0] != b.shape[0]:
        raise DimensionError("bias_add: bias %s does not match leading axis of %s"
                             % (b.shape, x.shape))
    bshape = (b.shape[0],) + (1,) * (x.ndim - 1)
    rest = tuple(range(1, x.ndim))
    return _apply("bias_add", x.data + b.data.reshape(bshape),
                  [(x, lambda g: g),
                   (b, lambda g: g.sum(axis=rest) if rest else g.copy())])


def standardize(x, axes, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalization over the given axes.

    Stand-in for batch normalization at batch size one: statistics come
    from the tensor itself (per remaining axis), with a fixed epsilon.
    """
    x = lift(x)
    axes = _norm_axes(x, axes)
    ad = x.data
    n = 1
    for ax in axes:
        n *= ad.shape[ax]
    if n < 1:
        raise DimensionError("standardize over empty axes")
    mu = np.mean(ad, axis=axes, keepdims=True)
    var = np.mean((ad - mu) ** 2, axis=axes, keepdims=True)
    margin_monitor.note_norm_var(var)
    s = np.sqrt(var + eps)
    y = (ad - mu) / s

    def vjp(g):
        gm = np.mean(g, axis=axes, keepdims=True)
        gym = np.mean(g * y, axis=axes, keepdims=True)
        return (g - gm - y * gym) / s

    return _apply("standardize", y, [(x, vjp)])


def conv2d(x, k, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate x (ci,h,w) with kernel k (co,ci,kh,kw)."""
    x, k = lift(x), lift(k)
    if not isinstance(stride, (int, np.integer)) or stride <= 0:
        raise ConfigError("conv2d stride must be a positive integer")
    if not isinstance(pad, (int, np.integer)) or pad < 0:
        raise ConfigError("conv2d pad must be a nonnegative integer")
    if x.ndim != 3 or k.ndim != 4:
        raise DimensionError("conv2d expects x (ci,h,w) and k (co,ci,kh,kw)")
    ci, h, w = x.shape
    co, ci2, kh, kw = k.shape
    if ci != ci2:
        raise DimensionError("conv2d channel mismatch: x has %d, kernel expects %d"
                             % (ci, ci2))
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise DimensionError("conv2d kernel %dx%d exceeds padded extents %dx%d"
                             % (kh, kw, h + 2 * pad, w + 2 * pad))
    out = kernels.conv2d_forward(x.data, k.data, stride, pad)
    xd, kd = x.data, k.data
    xshape, kshape = x.shape, k.shape
    return _apply(
        "conv2d", out,
        [(x, lambda g: kernels.conv2d_grad_input(g, kd, stride, pad, xshape)),
         (k, lambda g: kernels.conv2d_grad_kernel(g, xd, stride, pad, kshape))])


def conv2d_transpose(x, k, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution of x (ci,h,w) with kernel k (ci,co,kh,kw)."""
    x, k = lift(x), lift(k)
    if not isinstance(stride, (int, np.integer)) or stride <= 0:
        raise ConfigError("conv2d_transpose stride must be a positive integer")
    if x.ndim != 3 or k.ndim != 4:
        raise DimensionError("conv2d_transpose expects x (ci,h,w) and k (ci,co,kh,kw)")
    ci, h, w = x.shape
    ci2, co, kh, kw = k.shape
    if ci != ci2:
        raise DimensionError("conv2d_transpose channel mismatch")
    ho = (h - 1) * stride + kh - 2 * pad
    wo = (w - 1) * stride + kw - 2 * pad
    if ho <= 0 or wo <= 0:
        raise DimensionError("conv2d_transpose output extents %dx%d are not positive"
                             % (ho, wo))
    xd, kd = x.data, k.data
    out = kernels.conv2d_grad_input(xd, kd, stride, pad, (co, ho, wo))
    kshape = k.shape
    return _apply(
        "conv2d_transpose", out,
        [(x, lambda g: kernels.conv2d_forward(g, kd, stride, pad)),
         (k, lambda g: kernels.conv2d_grad_kernel(xd, g, stride, pad, kshape))])


def avg_pool2d(x, window: int, stride: Optional[int] = None) -> Tensor:
    """Window-mean pooling; when window == stride extents must divide."""
    x = lift(x)
    stride = window if stride is None else stride
    if not isinstance(window, (int, np.integer)) or window <= 0:
        raise ConfigError("avg_pool2d window must be a positive integer")
    if not isinstance(stride, (int, np.integer)) or stride <= 0:
        raise ConfigError("avg_pool2d stride must be a positive integer")
    if x.ndim != 3:
        raise DimensionError("avg_pool2d expects (c,h,w)")
    c, h, w = x.shape
    if window == stride and (h % stride or w % stride):
        raise DimensionError("extents %dx%d not divisible by window %d"
                             % (h, w, window))
    if window > h or window > w:
        raise DimensionError("window %d exceeds extents %dx%d" % (window, h, w))
    out = kernels.avg_pool_forward(x.data, window, stride)
    xshape = x.shape
    return _apply("avg_pool2d", out,
                  [(x, lambda g: kernels.avg_pool_grad(g, window, stride, xshape))])


def upsample_nearest(x, factor: int) -> Tensor:
    x = lift(x)
    if not isinstance(factor, (int, np.integer)) or factor <= 0:
        raise ConfigError("upsample factor must be a positive integer")
    if x.ndim != 3:
        raise DimensionError("upsample_nearest expects (c,h,w)")
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def vjp(g):
        return g.reshape(c, h, factor, w, factor).sum(axis=(2, 4))

    return _apply("upsample_nearest", out, [(x, vjp)])


def bilinear_sample(img, coords) -> Tensor:
    """Sample img (c,h,w) at coords (2,h',w'): coords[0]=x (col), coords[1]=y (row).

    Out-of-range coordinates clamp to the border for interpolation; their
    coordinate gradient is zero.
    """
    img, coords = lift(img), lift(coords)
    if img.ndim != 3 or coords.ndim != 3 or coords.shape[0] != 2:
        raise DimensionError("bilinear_sample expects img (c,h,w), coords (2,h',w')")
    if not np.all(np.isfinite(coords.data)):
        raise DomainError("bilinear_sample coordinates must be finite")
    xs = coords.data[0]
    ys = coords.data[1]
    # cell boundaries (integer coordinates, incl. the clamp borders) are the
    # gradient kinks of bilinear interpolation
    margin_monitor.note_kink(np.abs(xs - np.round(xs)))
    margin_monitor.note_kink(np.abs(ys - np.round(ys)))
    out = kernels.bilinear_forward(img.data, xs, ys)
    imd = img.data

    def vjp_img(g):
        return kernels.bilinear_grad(imd, xs, ys, g)[0]

    def vjp_coords(g):
        _, gxs, gys = kernels.bilinear_grad(imd, xs, ys, g)
        return np.stack([gxs, gys], axis=0)

    return _apply("bilinear_sample", out, [(img, vjp_img), (coords, vjp_coords)])
