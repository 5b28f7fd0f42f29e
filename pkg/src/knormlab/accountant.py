"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

RDP at each order is composed linearly over steps and converted with
``eps = min_a [T * RDP(a) + log(1/delta) / (a - 1)]``.
"""

import math

import numpy as np
from scipy import special

from .errors import ConfigError, ContractError

DEFAULT_ORDERS = tuple([1.25, 1.5, 1.75] + [1.0 + k / 4.0 for k in range(4, 13)] + list(range(5, 65)))

_FRAC_MAX_TERMS = 2000


def _log_add(a, b):
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    hi, lo = max(a, b), min(a, b)
    return hi + math.log1p(math.exp(lo - hi))


def _log_sub(a, b):
    """log(exp(a) - exp(b)) for a >= b."""
    if b == -math.inf:
        return a
    if b >= a:
        return -math.inf
    return a + math.log1p(-math.exp(b - a))


def _log_erfc(x):
    return math.log(2.0) + float(special.log_ndtr(-x * math.sqrt(2.0)))


def _log_a_int(q, sigma, alpha):
    i = np.arange(alpha + 1, dtype=np.float64)
    log_binom = special.gammaln(alpha + 1) - special.gammaln(i + 1) - special.gammaln(alpha - i + 1)
    terms = log_binom + i * math.log(q) + (alpha - i) * math.log1p(-q) + (i * i - i) / (2.0 * sigma**2)
    return float(special.logsumexp(terms))


def _log_a_frac(q, sigma, alpha):
    # two half-line integrals expanded as binomial series; coefficients change
    # sign past floor(alpha), so positive and negative parts are kept apart
    z0 = sigma**2 * math.log(1.0 / q - 1.0) + 0.5
    lq, l1q = math.log(q), math.log1p(-q)
    pos0 = pos1 = neg0 = neg1 = -math.inf
    s2 = math.sqrt(2.0) * sigma
    for i in range(_FRAC_MAX_TERMS):
        coef = special.binom(alpha, i)
        if coef == 0.0:
            continue
        lc = math.log(abs(coef))
        j = alpha - i
        ls0 = lc + i * lq + j * l1q + (i * i - i) / (2 * sigma**2) + math.log(0.5) + _log_erfc((i - z0) / s2)
        ls1 = lc + j * lq + i * l1q + (j * j - j) / (2 * sigma**2) + math.log(0.5) + _log_erfc((z0 - j) / s2)
        if coef > 0:
            pos0, pos1 = _log_add(pos0, ls0), _log_add(pos1, ls1)
        else:
            neg0, neg1 = _log_add(neg0, ls0), _log_add(neg1, ls1)
        total = _log_add(pos0, pos1)
        if i > alpha and max(ls0, ls1) < total - 36:
            break
    return _log_sub(_log_add(pos0, pos1), _log_add(neg0, neg1))


def rdp_subsampled_gaussian(q, sigma, alpha):
    """RDP of one step of the sampled Gaussian mechanism at order ``alpha``."""
    if sigma == 0:
        return math.inf
    if q == 0:
        return 0.0
    if q == 1.0:
        return alpha / (2.0 * sigma**2)
    if float(alpha).is_integer():
        log_a = _log_a_int(q, sigma, int(alpha))
    else:
        log_a = _log_a_frac(q, sigma, alpha)
    return max(log_a, 0.0) / (alpha - 1.0)


def rdp_curve(q, sigma, orders=DEFAULT_ORDERS):
    return np.array([rdp_subsampled_gaussian(q, sigma, a) for a in orders])


def eps_from_rdp(rdp, orders, delta):
    """Returns ``(epsilon, best_order)``."""
    orders = np.asarray(orders, dtype=np.float64)
    rdp = np.asarray(rdp, dtype=np.float64)
    eps = rdp + math.log(1.0 / delta) / (orders - 1.0)
    k = int(np.nanargmin(eps))
    return float(eps[k]), float(orders[k])


def _check(q, sigma, delta, orders):
    if not 0.0 < q <= 1.0:
        raise ContractError(f"sampling rate must be in (0, 1], got {q}")
    if sigma < 0:
        raise ContractError(f"noise multiplier must be non-negative, got {sigma}")
    if not 0.0 < delta < 1.0:
        raise ContractError(f"delta must be in (0, 1), got {delta}")
    if min(orders) <= 1.0:
        raise ContractError("RDP orders must exceed 1")


def rdp_epsilon(q, sigma, steps, delta, orders=DEFAULT_ORDERS):
    """(eps, delta)-DP epsilon after ``steps`` sampled-Gaussian steps; inf when sigma == 0."""
    _check(q, sigma, delta, orders)
    if steps == 0:
        return 0.0
    if sigma == 0:
        return math.inf
    return eps_from_rdp(rdp_curve(q, sigma, orders) * steps, orders, delta)[0]


def calibrate_sigma(target_eps, delta, q, steps, orders=DEFAULT_ORDERS, rel_tol=1e-3, ceiling=1e6):
    """Smallest noise multiplier (to ``rel_tol``) whose epsilon stays at or below ``target_eps``.

    The returned sigma always satisfies the budget; its epsilon is within 1%
    below the target.
    """
    if target_eps <= 0:
        raise ContractError(f"target epsilon must be positive, got {target_eps}")
    _check(q, 1.0, delta, orders)

    def eps(s):
        return rdp_epsilon(q, s, steps, delta, orders)

    if eps(ceiling) > target_eps:
        raise ConfigError(f"target epsilon {target_eps} unreachable with sigma <= {ceiling:g}")
    hi = 1.0
    while eps(hi) > target_eps:
        hi *= 2.0
    lo = hi / 2.0
    while eps(lo) <= target_eps:
        hi = lo
        lo /= 2.0
        if lo < 1e-6:
            return hi
    # eps(lo) > target >= eps(hi)
    while True:
        if (hi - lo) / hi < rel_tol and eps(hi) >= 0.99 * target_eps:
            return hi
        mid = math.sqrt(lo * hi)
        if eps(mid) <= target_eps:
            hi = mid
        else:
            lo = mid


class PrivacyAccountant:
    """Step-counting accountant for a fixed (q, sigma, delta)."""

    def __init__(self, q, sigma, delta, orders=DEFAULT_ORDERS):
        _check(q, sigma, delta, orders)
        self.q, self.sigma, self.delta = float(q), float(sigma), float(delta)
        self.orders = tuple(orders)
        self.steps = 0
        self._rdp = rdp_curve(self.q, self.sigma, self.orders) if sigma > 0 else None

    def epsilon(self, steps=None):
        steps = self.steps if steps is None else steps
        if steps == 0:
            return 0.0
        if self._rdp is None:
            return math.inf
        return eps_from_rdp(self._rdp * steps, self.orders, self.delta)[0]

    def step(self, n=1):
        self.steps += n
        return self.epsilon()
