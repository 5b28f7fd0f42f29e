"""Independent reference implementations used as test oracles.

Everything here is written with explicit Python loops over scalars (or plain
numerical integration) and shares no code with the package beyond the
documented random-stream convention for dropout masks.
"""

import math

import numpy as np
from scipy import integrate


def conv2d_naive(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = pad
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, f, ho, wo))
    for s in range(n):
        for k in range(f):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0 if b is None else float(b[k])
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                yy, xx = oy * sh + i - ph, ox * sw + j - pw
                                if 0 <= yy < h and 0 <= xx < wd:
                                    acc += x[s, ch, yy, xx] * w[k, ch, i, j]
                    out[s, k, oy, ox] = acc
    return out


def _unit(x, s, oy, ox, c, kh, kw, sh, sw, ph, pw):
    h, wd = x.shape[2:]
    vals = []
    valid = []
    for ch in range(c):
        for i in range(kh):
            for j in range(kw):
                yy, xx = oy * sh + i - ph, ox * sw + j - pw
                inside = 0 <= yy < h and 0 <= xx < wd
                vals.append(float(x[s, ch, yy, xx]) if inside else 0.0)
                valid.append(inside)
    return vals, valid


def standardize_scalar(vals, keep=None, eps=1e-5, scale=1.0, valid=None):
    d = len(vals)
    keep = keep if keep is not None else [1.0] * d
    valid = valid if valid is not None else [True] * d
    cnt = sum(1 for v in valid if v)
    perturbed = [vals[t] * keep[t] * scale for t in range(d)]
    mu = sum(perturbed[t] for t in range(d) if valid[t]) / cnt
    var = sum((perturbed[t] - mu) ** 2 for t in range(d) if valid[t]) / cnt
    inv = 1.0 / math.sqrt(var + eps)
    return [((vals[t] - mu) * inv) if valid[t] else 0.0 for t in range(d)]


def knconv_naive(x, w, b, stride, pad, masks=None, eps=1e-5, scale=1.0, pad_in_stats=True):
    """masks: (N, L, c*kh*kw) keep-masks in channel-major patch order, or None."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = pad
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, f, ho, wo))
    for s in range(n):
        for oy in range(ho):
            for ox in range(wo):
                vals, valid = _unit(x, s, oy, ox, c, kh, kw, sh, sw, ph, pw)
                keep = None if masks is None else list(masks[s, oy * wo + ox])
                z = standardize_scalar(vals, keep, eps, scale, None if pad_in_stats else valid)
                for k in range(f):
                    acc = 0.0 if b is None else float(b[k])
                    t = 0
                    for ch in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                acc += z[t] * w[k, ch, i, j]
                                t += 1
                    out[s, k, oy, ox] = acc
    return out


def kernelnorm_naive(x, kernel, stride, masks=None, eps=1e-5, scale=1.0):
    n, c, h, wd = x.shape
    kh, kw = kernel
    sh, sw = stride
    lh = (h - kh) // sh + 1
    lw = (wd - kw) // sw + 1
    out = np.zeros((n, c, kh * lh, kw * lw))
    for s in range(n):
        for wy in range(lh):
            for wx in range(lw):
                vals, _ = _unit(x, s, wy, wx, c, kh, kw, sh, sw, 0, 0)
                keep = None if masks is None else list(masks[s, wy * lw + wx])
                z = standardize_scalar(vals, keep, eps, scale)
                t = 0
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            out[s, ch, wy * kh + i, wx * kw + j] = z[t]
                            t += 1
    return out


def groupnorm_naive(x, group_size, gamma, beta, eps=1e-5):
    n, c, h, wd = x.shape
    out = np.zeros_like(x)
    for s in range(n):
        for g0 in range(0, c, group_size):
            vals = [float(x[s, ch, i, j]) for ch in range(g0, g0 + group_size) for i in range(h) for j in range(wd)]
            mu = sum(vals) / len(vals)
            var = sum((v - mu) ** 2 for v in vals) / len(vals)
            for ch in range(g0, g0 + group_size):
                for i in range(h):
                    for j in range(wd):
                        out[s, ch, i, j] = (x[s, ch, i, j] - mu) / math.sqrt(var + eps) * gamma[ch] + beta[ch]
    return out


def maxpool_naive(x, k):
    n, c, h, wd = x.shape
    ho, wo = h // k, wd // k
    out = np.zeros((n, c, ho, wo))
    for s in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    out[s, ch, oy, ox] = max(x[s, ch, oy * k + i, ox * k + j] for i in range(k) for j in range(k))
    return out


def adaptive_avgpool_naive(x, oh, ow):
    n, c, h, wd = x.shape
    out = np.zeros((n, c, oh, ow))
    for oy in range(oh):
        y0, y1 = (oy * h) // oh, -((-(oy + 1) * h) // oh)
        for ox in range(ow):
            x0, x1 = (ox * wd) // ow, -((-(ox + 1) * wd) // ow)
            for s in range(n):
                for ch in range(c):
                    vals = [x[s, ch, i, j] for i in range(y0, y1) for j in range(x0, x1)]
                    out[s, ch, oy, ox] = sum(vals) / len(vals)
    return out


def weighted_mean_loop(vectors, sizes):
    d = len(vectors[0])
    tot = float(sum(sizes))
    return np.array([sum(sizes[j] * vectors[j][i] for j in range(len(vectors))) / tot for i in range(d)])


def rdp_quadrature(q, sigma, alpha):
    """RDP of the sampled Gaussian by direct integration of the Renyi moment
    E_{z ~ N(0, s^2)}[((1 - q) + q exp((2z - 1) / (2 s^2)))^alpha], in log space."""

    def log_f(z):
        log_mu0 = -z * z / (2 * sigma**2) - math.log(sigma * math.sqrt(2 * math.pi))
        r = (2 * z - 1) / (2 * sigma**2)
        # log((1-q) + q e^r) computed stably
        a, b = math.log1p(-q), math.log(q) + r
        hi = max(a, b)
        mix = hi + math.log(math.exp(a - hi) + math.exp(b - hi))
        return log_mu0 + alpha * mix

    lo, hi = -40 * sigma, 40 * sigma + 2 * alpha
    grid = np.linspace(lo, hi, 4001)
    peak = max(log_f(z) for z in grid)
    pts = list(np.linspace(lo, hi, 41))
    total = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        val, _ = integrate.quad(lambda z: math.exp(log_f(z) - peak), a, b, epsabs=0, epsrel=1e-13, limit=200)
        total += val
    return (peak + math.log(total)) / (alpha - 1)


def gaussian_eps_closed_form(sigma, steps, delta, orders):
    """q = 1: RDP(alpha) = alpha / (2 sigma^2) exactly; standard conversion over ``orders``."""
    return min(steps * a / (2 * sigma**2) + math.log(1 / delta) / (a - 1) for a in orders)
