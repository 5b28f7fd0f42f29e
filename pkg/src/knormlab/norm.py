"""KernelNorm, KNConv and the batch-independent global baselines.

KernelNorm standardizes every (channels x kh x kw) window with the mean and
population variance of a dropped-out copy of that window.  Dropped elements
enter the sums as zeros and the divisor stays ``c*kh*kw``.  All layers here
treat each sample on its own, so a batch gives the same rows as its samples run
separately.
"""

import numpy as np

from . import ops
from .autodiff import Tensor, record
from .errors import ConfigError, DimensionError
from .ops import _pair

DEFAULT_EPS = 1e-5


def unit_masks(rng, p, unit_shape, sample_ids, key, dtype=np.float64):
    """Keep-masks of shape (N, *unit_shape), one independent stream per sample."""
    n = len(sample_ids)
    if p == 0.0 or rng is None:
        if p > 0.0:
            raise ValueError("dropout with p > 0 needs an rng")
        return None
    masks = np.empty((n,) + tuple(unit_shape), dtype=dtype)
    for i, sid in enumerate(sample_ids):
        masks[i] = ops.drop_mask(rng.stream("kn", *key, int(sid)), unit_shape, p, dtype)
    return masks


def _scale(p, rescale):
    return 1.0 / (1.0 - p) if (rescale and p > 0) else 1.0


def kernel_normalize_unit(unit, p=0.0, rng=None, eps=DEFAULT_EPS, stream=(), rescale=False):
    """Normalize one (c, kh, kw) unit; returns ``(normalized, mask)``."""
    u = ops.as_tensor(unit)
    if u.size == 0:
        raise DimensionError("kernel_normalize_unit", "unit", "empty normalization unit")
    mask = None
    if p > 0:
        mask = ops.drop_mask(rng.stream("kn", *stream), u.shape, p, u.dtype)
    flat = ops.reshape(u, (1, u.size))
    out = ops.standardize_rows(flat, None if mask is None else mask.reshape(1, -1), _scale(p, rescale), eps)
    return ops.reshape(out, u.shape), (np.ones(u.shape, u.dtype) if mask is None else mask)


def _standardize_valid(x, mask, valid, scale, eps):
    # statistics over `valid` entries only; invalid entries output 0
    shape = x.shape
    d = shape[-1]
    xd = x.data.reshape(-1, d)
    m = np.ones_like(xd) if mask is None else mask.reshape(-1, d)
    w = np.broadcast_to(valid, shape).reshape(-1, d)
    cnt = w.sum(axis=1)
    v = xd * m * scale
    mu = (w * v).sum(axis=1) / cnt
    dev = v - mu[:, None]
    var = (w * dev * dev).sum(axis=1) / cnt
    inv = 1.0 / np.sqrt(var + eps)
    out = w * (xd - mu[:, None]) * inv[:, None]

    def vjp(g):
        g = g.reshape(-1, d) * w
        gi = g * inv[:, None]
        dmu = -gi.sum(axis=1)
        dvar = -0.5 * inv**3 * (g * (xd - mu[:, None])).sum(axis=1)
        dv = w * ((dmu / cnt)[:, None] + (2.0 / cnt)[:, None] * dvar[:, None] * dev)
        return ((gi + dv * m * scale).reshape(shape),)

    return record(out.reshape(shape), (x,), vjp)


def normalize_patches(cols, p=0.0, rng=None, eps=DEFAULT_EPS, key=(), sample_ids=None, rescale=False, valid=None):
    """KernelNorm over patch rows (N, L, D); each row is one unit."""
    n, nl, d = cols.shape
    if sample_ids is None:
        sample_ids = np.arange(n)
    masks = unit_masks(rng, p, (nl, d), sample_ids, key, cols.dtype)
    if valid is not None:
        return _standardize_valid(cols, masks, valid, _scale(p, rescale), eps)
    return ops.standardize_rows(cols, masks, _scale(p, rescale), eps)


def _padding_validity(h, w, kernel, stride, padding, dtype):
    ones = Tensor(np.ones((1, 1, h, w), dtype=dtype))
    v = ops.im2col(ones, kernel, stride, padding).data[0]  # (L, kh*kw)
    return v


def knconv(x, weight, bias=None, stride=1, padding=0, p=0.0, rng=None, eps=DEFAULT_EPS,
           key=(), sample_ids=None, rescale=False, pad_in_stats=True):
    """Kernel normalized convolution: extract patches, normalize each, contract with filters."""
    if x.ndim != 4:
        raise DimensionError("knconv", "ndim", f"expected NCHW input, got shape {x.shape}")
    if weight.shape[1] != x.shape[1]:
        raise DimensionError("knconv", "C", f"input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    kernel = weight.shape[2:]
    stride, padding = _pair(stride), _pair(padding)
    cols = ops.im2col(x, kernel, stride, padding)
    valid = None
    if not pad_in_stats and (padding[0] or padding[1]):
        v = _padding_validity(x.shape[2], x.shape[3], kernel, stride, padding, x.dtype)
        valid = np.tile(v, (1, x.shape[1]))[None]  # channel-major patch layout
    normed = normalize_patches(cols, p, rng, eps, key, sample_ids, rescale, valid)
    ho, wo = ops.conv_out_hw(x.shape[2], x.shape[3], kernel, stride, padding)
    return ops.rows_to_nchw(ops.contract(normed, weight, bias), ho, wo)


def kernelnorm_layer(x, kernel, stride=None, p=0.0, rng=None, eps=DEFAULT_EPS,
                     key=(), sample_ids=None, rescale=False):
    """Standalone KernelNorm; output (N, C, kh*Lh, kw*Lw) with windows laid out in grid order."""
    kernel = _pair(kernel)
    stride = kernel if stride is None else _pair(stride)
    if x.ndim != 4:
        raise DimensionError("kernelnorm_layer", "ndim", f"expected NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    kh, kw = kernel
    if kh > h:
        raise DimensionError("kernelnorm_layer", "H", f"kernel height {kh} larger than input height {h}")
    if kw > w:
        raise DimensionError("kernelnorm_layer", "W", f"kernel width {kw} larger than input width {w}")
    cols = ops.im2col(x, kernel, stride, 0)
    lh, lw = ops.conv_out_hw(h, w, kernel, stride, (0, 0))
    normed = normalize_patches(cols, p, rng, eps, key, sample_ids, rescale)
    grid = ops.reshape(normed, (n, lh, lw, c, kh, kw))
    grid = ops.transpose(grid, (0, 3, 1, 4, 2, 5))
    return ops.reshape(grid, (n, c, lh * kh, lw * kw))


def kernelnorm_output_shape(shape, kernel, stride=None):
    n, c, h, w = shape
    kh, kw = _pair(kernel)
    sh, sw = (kh, kw) if stride is None else _pair(stride)
    return n, c, kh * ((h - kh) // sh + 1), kw * ((w - kw) // sw + 1)


def layer_normalize(x, gamma, beta, eps=DEFAULT_EPS):
    n = x.shape[0]
    z = ops.standardize_rows(ops.reshape(x, (n, -1)), None, 1.0, eps)
    return ops.channel_affine(ops.reshape(z, x.shape), gamma, beta)


def group_normalize(x, group_size, gamma, beta, eps=DEFAULT_EPS):
    """Standardize each block of ``group_size`` consecutive channels per sample."""
    n, c = x.shape[:2]
    g = int(group_size)
    if g < 1 or c % g:
        raise ConfigError(f"group_normalize: {c} channels not divisible by group size {g}")
    z = ops.standardize_rows(ops.reshape(x, (n, c // g, -1)), None, 1.0, eps)
    return ops.channel_affine(ops.reshape(z, x.shape), gamma, beta)


def no_norm(x):
    return x
