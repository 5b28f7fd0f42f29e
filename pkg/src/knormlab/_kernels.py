"""Hot inner loops: patch extraction, patch scatter-add and per-row standardization.

Each kernel exists twice: a numba ``@njit`` version and a pure-numpy version.
``KNORMLAB_NUMBA=0`` (or numba missing) selects the numpy path at import time;
:func:`use_numba` switches at runtime, which the tests and the benchmark use to
compare both paths on identical inputs.
"""

import os

import numpy as np

try:
    import numba
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

_USE_NUMBA = HAS_NUMBA and os.environ.get("KNORMLAB_NUMBA", "1").lower() not in ("0", "false", "no")


def use_numba(flag=None):
    """Return whether numba kernels are active; optionally set it first."""
    global _USE_NUMBA
    if flag is not None:
        if flag and not HAS_NUMBA:
            raise RuntimeError("numba is not installed")
        _USE_NUMBA = bool(flag)
    return _USE_NUMBA


def set_threads(n):
    if HAS_NUMBA:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


# --------------------------------------------------------------------------
# numpy reference path


def _im2col_np(xp, kh, kw, sh, sw):
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    # (N, C, Ho, Wo, kh, kw) -> (N, Ho, Wo, C, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho * wo, c * kh * kw)


def _col2im_np(cols, c, hp, wp, kh, kw, sh, sw):
    n = cols.shape[0]
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    g = cols.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw] += g[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return out


def _rows_standardize_np(x, mask, scale, eps):
    xs = x if mask is None else x * mask * scale
    mu = xs.mean(axis=-1)
    dev = xs - mu[:, None]
    var = (dev * dev).mean(axis=-1)
    inv = 1.0 / np.sqrt(var + eps)
    return (x - mu[:, None]) * inv[:, None], mu, inv


def _rows_standardize_grad_np(g, x, mask, scale, mu, inv):
    d = x.shape[-1]
    centered = x - mu[:, None]
    gi = g * inv[:, None]
    dmu = -gi.sum(axis=-1)
    dvar = -0.5 * inv**3 * (g * centered).sum(axis=-1)
    xs = x if mask is None else x * mask * scale
    dxs = (dmu / d)[:, None] + (2.0 / d) * dvar[:, None] * (xs - mu[:, None])
    if mask is not None:
        dxs = dxs * mask * scale
    return gi + dxs


# --------------------------------------------------------------------------
# numba path

if HAS_NUMBA:

    @njit(cache=True)
    def _im2col_nb(xp, kh, kw, sh, sw):
        n, c, hp, wp = xp.shape
        ho = (hp - kh) // sh + 1
        wo = (wp - kw) // sw + 1
        out = np.empty((n, ho * wo, c * kh * kw), dtype=xp.dtype)
        # one input row feeds kw entries of every patch along that output row
        for b in range(n):
            for oy in range(ho):
                for ch in range(c):
                    for i in range(kh):
                        row = xp[b, ch, oy * sh + i]
                        base = (ch * kh + i) * kw
                        for ox in range(wo):
                            dst = out[b, oy * wo + ox]
                            for j in range(kw):
                                dst[base + j] = row[ox * sw + j]
        return out

    @njit(cache=True)
    def _col2im_nb(cols, c, hp, wp, kh, kw, sh, sw):
        n = cols.shape[0]
        ho = (hp - kh) // sh + 1
        wo = (wp - kw) // sw + 1
        out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    l = oy * wo + ox
                    d = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                out[b, ch, oy * sh + i, ox * sw + j] += cols[b, l, d]
                                d += 1
        return out

    @njit(cache=True)
    def _rows_standardize_nb(x, mask, has_mask, scale, eps):
        r, d = x.shape
        out = np.empty_like(x)
        mu = np.empty(r, dtype=x.dtype)
        inv = np.empty(r, dtype=x.dtype)
        for k in range(r):
            s = 0.0
            for t in range(d):
                v = x[k, t] * mask[k, t] * scale if has_mask else x[k, t]
                s += v
            m = s / d
            s2 = 0.0
            for t in range(d):
                v = x[k, t] * mask[k, t] * scale if has_mask else x[k, t]
                s2 += (v - m) * (v - m)
            iv = 1.0 / np.sqrt(s2 / d + eps)
            for t in range(d):
                out[k, t] = (x[k, t] - m) * iv
            mu[k] = m
            inv[k] = iv
        return out, mu, inv

    @njit(cache=True)
    def _rows_standardize_grad_nb(g, x, mask, has_mask, scale, mu, inv):
        r, d = x.shape
        out = np.empty_like(x)
        for k in range(r):
            m = mu[k]
            iv = inv[k]
            sg = 0.0
            sgc = 0.0
            for t in range(d):
                sg += g[k, t]
                sgc += g[k, t] * (x[k, t] - m)
            dmu = -sg * iv
            dvar = -0.5 * iv * iv * iv * sgc
            for t in range(d):
                if has_mask:
                    w = mask[k, t] * scale
                    v = x[k, t] * w
                    out[k, t] = g[k, t] * iv + (dmu / d + 2.0 / d * dvar * (v - m)) * w
                else:
                    out[k, t] = g[k, t] * iv + dmu / d + 2.0 / d * dvar * (x[k, t] - m)
        return out


_NO_MASK = {}


def _dummy_mask(dtype):
    if dtype not in _NO_MASK:
        _NO_MASK[dtype] = np.zeros((1, 1), dtype=dtype)
    return _NO_MASK[dtype]


# --------------------------------------------------------------------------
# dispatch


def im2col(xp, kh, kw, sh, sw):
    """Patches of a padded NCHW array as (N, Ho*Wo, C*kh*kw), channel-major inside a patch."""
    if _USE_NUMBA:
        return _im2col_nb(np.ascontiguousarray(xp), kh, kw, sh, sw)
    return _im2col_np(xp, kh, kw, sh, sw)


def col2im(cols, c, hp, wp, kh, kw, sh, sw):
    """Adjoint of :func:`im2col`: scatter-add patch rows back into a padded NCHW array."""
    if _USE_NUMBA:
        return _col2im_nb(np.ascontiguousarray(cols), c, hp, wp, kh, kw, sh, sw)
    return _col2im_np(cols, c, hp, wp, kh, kw, sh, sw)


def rows_standardize(x, mask=None, scale=1.0, eps=1e-5):
    """Standardize each row of ``x`` with statistics of ``x * mask * scale``.

    Returns ``(xhat, mu, inv_std)``.  The divisor is always the row length.
    """
    if _USE_NUMBA:
        x = np.ascontiguousarray(x)
        if mask is None:
            return _rows_standardize_nb(x, _dummy_mask(x.dtype), False, scale, eps)
        return _rows_standardize_nb(x, np.ascontiguousarray(mask, dtype=x.dtype), True, scale, eps)
    return _rows_standardize_np(x, mask, scale, eps)


def rows_standardize_grad(g, x, mask, scale, mu, inv):
    if _USE_NUMBA:
        g = np.ascontiguousarray(g)
        x = np.ascontiguousarray(x)
        if mask is None:
            return _rows_standardize_grad_nb(g, x, _dummy_mask(x.dtype), False, scale, mu, inv)
        m = np.ascontiguousarray(mask, dtype=x.dtype)
        return _rows_standardize_grad_nb(g, x, m, True, scale, mu, inv)
    return _rows_standardize_grad_np(g, x, mask, scale, mu, inv)
