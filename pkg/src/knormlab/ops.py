"""Differentiable primitives over :class:`~knormlab.autodiff.Tensor`.

Convolution is patch extraction followed by a contraction with the flattened
filters; KNConv reuses the same patch rows and standardizes them in between.
"""

import numpy as np

from . import _kernels as K
from .autodiff import Tensor, record
from .errors import ContractError, DimensionError

SOFTPLUS_THRESHOLD = 20.0

# branch decisions of piecewise ops (relu signs, max-pool winners), collected
# only while a gradient check probes for kink crossings
_branch_log = None


class branch_probe:
    """Collects the branch pattern of every piecewise op evaluated inside."""

    def __enter__(self):
        global _branch_log
        self._prev, _branch_log = _branch_log, []
        return _branch_log

    def __exit__(self, *exc):
        global _branch_log
        _branch_log = self._prev
        return False


def _log_branch(pattern):
    if _branch_log is not None:
        _branch_log.append(pattern)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise and structural


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return record(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def scale(x, c):
    c = float(c)
    return record(x.data * c, (x,), lambda g: (g * c,))


def neg(x):
    return scale(x, -1.0)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul", "ndim", f"expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError("matmul", "inner", f"{a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def sum(x, axis=None):  # noqa: A001 - mirrors numpy
    shape = x.shape
    out = x.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return record(out, (x,), vjp)


def mean(x, axis=None):
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis), 1.0 / n)


def reshape(x, shape):
    old = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    inv = np.argsort(axes)
    return record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def relu(x):
    pos = x.data > 0
    _log_branch(pos)
    return record(np.where(pos, x.data, 0.0).astype(x.dtype, copy=False), (x,), lambda g: (g * pos,))


def _softplus(x):
    return np.where(x > SOFTPLUS_THRESHOLD, x, np.log1p(np.exp(np.minimum(x, SOFTPLUS_THRESHOLD))))


def mish(x):
    """x * tanh(softplus(x)); softplus is taken as x above 20."""
    xd = x.data
    t = np.tanh(_softplus(xd))
    big = xd > SOFTPLUS_THRESHOLD
    dsp = np.where(big, 1.0, 1.0 / (1.0 + np.exp(-np.where(big, 0.0, xd))))

    def vjp(g):
        return (g * (t + xd * (1.0 - t * t) * dsp),)

    return record(xd * t, (x,), vjp)


def drop_mask(gen, shape, p, dtype=np.float64):
    """Keep-mask with each element zeroed independently with probability ``p``."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape, dtype=dtype)
    return (gen.random(shape) >= p).astype(dtype)


def dropout(x, p, rng, stream=(), rescale=False):
    """Zero each element with probability ``p``; returns ``(masked, mask)``.

    The mask comes from ``rng.stream(*stream)`` and is a constant for backward.
    No 1/(1-p) factor unless ``rescale``.
    """
    mask = drop_mask(rng.stream(*stream) if p > 0 else None, x.shape, p, x.dtype)
    m = mask / (1.0 - p) if rescale else mask
    return record(x.data * m, (x,), lambda g: (g * m,)), mask


# --------------------------------------------------------------------------
# patches and normalization


def conv_out_hw(h, w, kernel, stride, padding):
    kh, kw = kernel
    sh, sw = stride
    ph, pw = padding
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def _check_patch_args(op, shape, kernel, stride, padding):
    if len(shape) != 4:
        raise DimensionError(op, "ndim", f"expected NCHW input, got shape {shape}")
    _, _, h, w = shape
    (kh, kw), (sh, sw), (ph, pw) = kernel, stride, padding
    if sh < 1 or sw < 1:
        raise DimensionError(op, "stride", f"stride must be positive, got {stride}")
    if ph < 0 or pw < 0:
        raise DimensionError(op, "padding", f"padding must be non-negative, got {padding}")
    if kh > h + 2 * ph:
        raise DimensionError(op, "H", f"kernel height {kh} exceeds padded input height {h + 2 * ph}")
    if kw > w + 2 * pw:
        raise DimensionError(op, "W", f"kernel width {kw} exceeds padded input width {w + 2 * pw}")


def im2col(x, kernel, stride=1, padding=0):
    """Zero-padded patches of an NCHW tensor as (N, Ho*Wo, C*kh*kw)."""
    kernel, stride, padding = _pair(kernel), _pair(stride), _pair(padding)
    _check_patch_args("im2col", x.shape, kernel, stride, padding)
    n, c, h, w = x.shape
    (kh, kw), (sh, sw), (ph, pw) = kernel, stride, padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    cols = K.im2col(xp, kh, kw, sh, sw)

    def vjp(g):
        dxp = K.col2im(g, c, hp, wp, kh, kw, sh, sw)
        return (dxp[:, :, ph : ph + h, pw : pw + w],)

    return record(cols, (x,), vjp)


def standardize_rows(x, mask=None, scale=1.0, eps=1e-5):
    """Standardize along the last axis using stats of ``x * mask * scale``.

    The mask is treated as a constant.  The divisor of both mean and variance
    is the full row length, so dropped entries count as zeros.
    """
    shape = x.shape
    d = shape[-1]
    flat = x.data.reshape(-1, d)
    m = None if mask is None else mask.reshape(-1, d)
    out, mu, inv = K.rows_standardize(flat, m, scale, eps)

    def vjp(g):
        return (K.rows_standardize_grad(g.reshape(-1, d), flat, m, scale, mu, inv).reshape(shape),)

    return record(out.reshape(shape), (x,), vjp)


def contract(x, weight, bias=None):
    """``y[..., f] = sum_d x[..., d] * W[f, d] + b[f]`` with W of shape (F, ...).

    Parameter gradients support per-sample mode (leading axis of ``x`` is the
    sample axis).
    """
    f = weight.shape[0]
    d = int(np.prod(weight.shape[1:]))
    if x.shape[-1] != d:
        raise DimensionError("contract", "features", f"input has {x.shape[-1]} features, weight expects {d}")
    wshape = weight.shape
    wf = weight.data.reshape(f, d)
    xd = x.data
    y = xd @ wf.T
    if bias is not None:
        if bias.shape != (f,):
            raise DimensionError("contract", "bias", f"bias shape {bias.shape} != ({f},)")
        y = y + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def vjp(g, per_sample=False):
        dx = g @ wf
        if per_sample:
            n = xd.shape[0]
            g3 = g.reshape(n, -1, f)
            x3 = xd.reshape(n, -1, d)
            dw = np.matmul(g3.transpose(0, 2, 1), x3).reshape((n,) + wshape)
            db = g3.sum(axis=1)
        else:
            dw = (g.reshape(-1, f).T @ xd.reshape(-1, d)).reshape(wshape)
            db = g.reshape(-1, f).sum(axis=0)
        return (dx, dw) if bias is None else (dx, dw, db)

    return record(y, inputs, vjp, per_sample=True)


def linear(x, weight, bias=None):
    if x.ndim != 2:
        raise DimensionError("linear", "ndim", f"expected (N, D) input, got {x.shape}")
    return contract(x, weight, bias)


def rows_to_nchw(y, ho, wo):
    n, _, f = y.shape
    return transpose(reshape(y, (n, ho, wo, f)), (0, 3, 1, 2))


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation with zero padding, via patch extraction and a matmul."""
    if x.ndim != 4:
        raise DimensionError("conv2d", "ndim", f"expected NCHW input, got shape {x.shape}")
    if weight.ndim != 4:
        raise DimensionError("conv2d", "weight.ndim", f"expected (F, C, kh, kw) weight, got {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise DimensionError("conv2d", "C", f"input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    kernel = weight.shape[2:]
    stride, padding = _pair(stride), _pair(padding)
    cols = im2col(x, kernel, stride, padding)
    ho, wo = conv_out_hw(x.shape[2], x.shape[3], kernel, stride, padding)
    return rows_to_nchw(contract(cols, weight, bias), ho, wo)


def channel_affine(x, gamma, beta):
    """Per-channel ``gamma * x + beta`` on NCHW; per-sample aware."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("channel_affine", "C", f"affine params must have shape ({c},)")
    xd = x.data
    gd = gamma.data.reshape(1, c, 1, 1)
    y = xd * gd + beta.data.reshape(1, c, 1, 1)

    def vjp(g, per_sample=False):
        dx = g * gd
        if per_sample:
            return dx, (g * xd).sum(axis=(2, 3)), g.sum(axis=(2, 3))
        return dx, (g * xd).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return record(y, (x, gamma, beta), vjp, per_sample=True)


# --------------------------------------------------------------------------
# pooling


def max_pool2d(x, k=2):
    """Non-overlapping k x k max pooling; trailing rows/cols that do not fill a window are dropped."""
    k = int(k)
    n, c, h, w = x.shape
    if k > h or k > w:
        raise DimensionError("max_pool2d", "H" if k > h else "W", f"window {k} larger than input {h}x{w}")
    ho, wo = h // k, w // k
    xc = x.data[:, :, : ho * k, : wo * k]
    blocks = xc.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = blocks.argmax(axis=-1)
    _log_branch(idx)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros_like(x.data)
        gx[:, :, : ho * k, : wo * k] = (
            gb.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        )
        return (gx,)

    return record(out, (x,), vjp)


def _adaptive_bounds(size, out):
    return [((i * size) // out, -((-(i + 1) * size) // out)) for i in range(out)]


def adaptive_avg_pool2d(x, out_h, out_w=None):
    out_w = out_h if out_w is None else out_w
    n, c, h, w = x.shape
    rows = _adaptive_bounds(h, out_h)
    cols = _adaptive_bounds(w, out_w)
    out = np.empty((n, c, out_h, out_w), dtype=x.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def vjp(g):
        gx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = (r1 - r0) * (c1 - c0)
                gx[:, :, r0:r1, c0:c1] += (g[:, :, i, j] / area)[:, :, None, None]
        return (gx,)

    return record(out, (x,), vjp)


# --------------------------------------------------------------------------
# loss


def softmax_cross_entropy(logits, labels, reduction="mean"):
    """Cross-entropy of integer labels; ``reduction`` is mean, sum or none."""
    if logits.ndim != 2:
        raise DimensionError("softmax_cross_entropy", "ndim", f"expected (N, K) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise DimensionError("softmax_cross_entropy", "N", f"{labels.shape[0]} labels for {n} rows")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    se = ez.sum(axis=1, keepdims=True)
    lse = (np.log(se) + zmax)[:, 0]
    per = lse - z[np.arange(n), labels]
    prob = ez / se

    def base():
        d = prob.copy()
        d[np.arange(n), labels] -= 1.0
        return d

    if reduction == "none":
        return record(per, (logits,), lambda g: (base() * g[:, None],))
    if reduction == "sum":
        return record(np.asarray(per.sum()), (logits,), lambda g: (base() * g,))
    if reduction == "mean":
        return record(np.asarray(per.mean()), (logits,), lambda g: (base() * (g / n),))
    raise ValueError(f"unknown reduction {reduction!r}")


# operator sugar
Tensor.__add__ = lambda a, b: add(a, b)
Tensor.__radd__ = lambda a, b: add(b, a)
Tensor.__sub__ = lambda a, b: sub(a, b)
Tensor.__rsub__ = lambda a, b: sub(b, a)
Tensor.__mul__ = lambda a, b: scale(a, b) if np.isscalar(b) else mul(a, b)
Tensor.__rmul__ = lambda a, b: scale(a, b) if np.isscalar(b) else mul(b, a)
Tensor.__neg__ = lambda a: neg(a)
Tensor.__matmul__ = lambda a, b: matmul(a, b)
