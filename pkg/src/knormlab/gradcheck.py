"""Central-difference gradient checks against the tape.

Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``; the floor
keeps coordinates whose true gradient is ~0 from dominating with round-off.
Dropout masks are keyed on (layer, step, sample), so a fixed Context gives the
same masks on every perturbed evaluation and training mode checks cleanly.

Piecewise ops (ReLU, max-pool) log their branch pattern; when a +-h probe
lands on a different pattern than the base point the difference straddles a
kink, so the step is shrunk (up to ``RETRIES`` times by 10x).  Coordinates that
still straddle a kink are reported in ``kinks`` and left out of the error.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import GradTape, Tensor
from .errors import ContractError
from .layers import Context
from .ops import branch_probe
from .rng import Rng

RETRIES = 3


@dataclass
class GradcheckReport:
    max_rel_error: float
    worst: tuple
    n_checked: int
    kinks: list = field(default_factory=list)

    def ok(self, tol):
        return bool(self.max_rel_error < tol)


def rel_error(a, n, floor=1e-6):
    return abs(a - n) / max(abs(a), abs(n), floor)


def _coords(size, n_coords, gen):
    if n_coords is None or n_coords >= size:
        return np.arange(size)
    return np.sort(gen.choice(size, size=n_coords, replace=False))


def _same(a, b):
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


def _fd(f, arr, flat_idx, h, base):
    """Central difference at ``flat_idx``; returns (derivative or None if on a kink, fp, fm)."""
    view = arr.reshape(-1)
    old = view[flat_idx]
    try:
        for t in range(RETRIES + 1):
            hh = h / 10.0**t
            view[flat_idx] = old + hh
            with branch_probe() as bp:
                fp = f()
            view[flat_idx] = old - hh
            with branch_probe() as bm:
                fm = f()
            if not (math.isfinite(fp) and math.isfinite(fm)):
                return None, fp, fm
            if _same(bp, base) and _same(bm, base):
                return (fp - fm) / (2 * hh), fp, fm
        return None, fp, fm
    finally:
        view[flat_idx] = old


def check_function(fn, arrays, h=1e-5, n_coords=None, seed=0, floor=1e-6):
    """Check d fn / d array for every array in ``arrays``.

    ``fn`` takes a list of Tensors and returns a scalar Tensor.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with GradTape() as tape, branch_probe() as base:
        out = fn(ts)
    grads = tape.gradient(out, ts)
    gen = Rng(seed).stream("gradcheck")
    report = GradcheckReport(0.0, None, 0)

    def f():
        return fn([Tensor(a) for a in arrays]).item()

    for k, (arr, g) in enumerate(zip(arrays, grads)):
        for i in _coords(arr.size, n_coords, gen):
            num, fp, fm = _fd(f, arr, i, h, base)
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise ContractError(f"non-finite loss when perturbing input {k} at flat index {i}")
            if num is None:
                report.kinks.append((k, int(i)))
                continue
            e = rel_error(g.reshape(-1)[i], num, floor)
            report.n_checked += 1
            if e > report.max_rel_error:
                report.max_rel_error, report.worst = float(e), (k, int(i))
    return report


def finite_difference_check(model, x, y, h=1e-5, n_coords=200, seed=0, ctx=None, floor=1e-6):
    """Compare tape gradients of the mean cross-entropy with central differences
    on ``n_coords`` parameter coordinates sampled uniformly (None = all)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    ctx = ctx or Context(training=True, rng=Rng(seed), step=0)
    if ctx.sample_ids is None:
        ctx.sample_ids = np.arange(len(y))

    def loss():
        return ops.softmax_cross_entropy(model(x, ctx), y)

    params = model.parameters()
    for p in params:
        p.data = np.ascontiguousarray(p.data)
    with GradTape() as tape, branch_probe() as base:
        l0 = loss()
    if not math.isfinite(l0.item()):
        raise ContractError("non-finite loss at the unperturbed point")
    grads = tape.backward(l0, params)
    sizes = [p.size for p in params]
    total = int(sum(sizes))
    offsets = np.cumsum([0] + sizes)
    gen = Rng(seed).stream("gradcheck")
    report = GradcheckReport(0.0, None, 0)
    for c in _coords(total, n_coords, gen):
        k = int(np.searchsorted(offsets, c, side="right") - 1)
        p = params[k]
        i = int(c - offsets[k])
        num, fp, fm = _fd(lambda: loss().item(), p.data, i, h, base)
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ContractError(f"non-finite loss when perturbing {p.name}[{i}]")
        if num is None:
            report.kinks.append((p.name, i))
            continue
        e = rel_error(grads[p.name].reshape(-1)[i], num, floor)
        report.n_checked += 1
        if e > report.max_rel_error:
            report.max_rel_error, report.worst = float(e), (p.name, i)
    return report
