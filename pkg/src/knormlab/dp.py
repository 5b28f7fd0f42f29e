"""DP-SGD: per-sample gradients, L2 clipping, Gaussian noise and the update step."""

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .accountant import DEFAULT_ORDERS, PrivacyAccountant, calibrate_sigma
from .autodiff import GradTape
from .data import TRANSFORMS, augment_batch
from .errors import ConfigError, ContractError, PrivacyBudgetExhausted
from .layers import Context

log = logging.getLogger(__name__)


@dataclass
class PrivacySpec:
    epsilon: float = 6.0
    delta: float = 1e-5
    clip: float = 1.0
    sigma: float = None  # None -> calibrated from (epsilon, delta, q, steps)
    q: float = None
    steps: int = None

    def validate(self, n=None):
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ConfigError(f"delta must be in (0, 1), got {self.delta}")
        if not self.clip > 0:
            raise ConfigError(f"clipping norm must be positive, got {self.clip}")
        if n and self.delta >= 1.0 / n:
            log.warning("delta %.3g >= 1/N = %.3g; the guarantee is weak", self.delta, 1.0 / n)

    def resolve_sigma(self, orders=DEFAULT_ORDERS):
        if self.sigma is None:
            self.sigma = calibrate_sigma(self.epsilon, self.delta, self.q, self.steps, orders)
        return self.sigma


@dataclass
class AugmentationPolicy:
    transforms: tuple = ("identity",)
    crop_pad: int = 4

    def __post_init__(self):
        self.transforms = tuple(self.transforms)
        if not self.transforms:
            raise ConfigError("augmentation policy needs at least one transform")
        for t in self.transforms:
            if t not in TRANSFORMS:
                raise ConfigError(f"unknown transform {t!r}; expected one of {TRANSFORMS}")

    @property
    def multiplicity(self):
        return len(self.transforms)


PLAIN = AugmentationPolicy()
FLIP_CROP = AugmentationPolicy(("identity", "hflip", "crop"))


def _require_batch_independent(model):
    bad = model.batch_dependent_layers()
    if bad:
        raise ContractError(
            f"layers {bad} mix statistics across samples; per-sample gradients (DP-SGD) need batch-independent layers"
        )


def _psg_vectorized(model, x, y, ctx):
    with GradTape() as tape:
        losses = ops.softmax_cross_entropy(model(x, ctx), y, reduction="none")
    grads = tape.backward(losses, model.parameters(), per_sample=True)
    return model.flatten_grads(grads, per_sample=True)


def _psg_loop(model, x, y, ctx):
    out = np.empty((len(y), model.n_params()), dtype=model.dtype)
    params = model.parameters()
    for i in range(len(y)):
        c = Context(ctx.training, ctx.rng, ctx.step, ctx.sample_ids[i : i + 1])
        with GradTape() as tape:
            loss = ops.softmax_cross_entropy(model(x[i : i + 1], c), y[i : i + 1])
        out[i] = model.flatten_grads(tape.backward(loss, params))
    return out


def per_sample_gradients(model, x, y, augmentation=PLAIN, rng=None, step=0, sample_ids=None,
                         training=True, method="vectorized"):
    """(B, P) matrix of per-sample gradients, averaged over augmentations before any clipping."""
    _require_batch_independent(model)
    x = np.asarray(x, dtype=model.dtype)
    y = np.asarray(y, dtype=np.int64)
    sample_ids = np.arange(len(y)) if sample_ids is None else np.asarray(sample_ids)
    ctx = Context(training=training, rng=rng, step=step, sample_ids=sample_ids)
    fn = {"vectorized": _psg_vectorized, "loop": _psg_loop}[method]
    acc = None
    for k, t in enumerate(augmentation.transforms):
        xk = augment_batch(x, t, rng, (step, k), sample_ids, augmentation.crop_pad)
        g = fn(model, xk, y, ctx)
        acc = g if acc is None else acc + g
    if augmentation.multiplicity > 1:
        acc /= augmentation.multiplicity
    return acc


def clip_per_sample(grads, clip):
    """Scale each row by min(1, clip / ||row||)."""
    if not clip > 0:
        raise ContractError(f"clipping norm must be positive, got {clip}")
    if math.isinf(clip):
        return grads.copy()
    norms = np.sqrt(np.einsum("ij,ij->i", grads, grads))
    factor = np.minimum(1.0, clip / np.maximum(norms, np.finfo(grads.dtype).tiny))
    return grads * factor[:, None]


def noisy_aggregate(clipped, clip, sigma, batch_size, rng=None, stream=("noise",)):
    """(sum of rows + N(0, sigma^2 clip^2 I)) / batch_size."""
    if sigma < 0:
        raise ContractError(f"noise multiplier must be non-negative, got {sigma}")
    total = clipped.sum(axis=0)
    if sigma > 0:
        if math.isinf(clip):
            raise ContractError("noise with unbounded clipping norm")
        total = total + rng.stream(*stream).normal(0.0, sigma * clip, size=total.shape).astype(total.dtype)
    return total / batch_size


def dp_sgd_step(model, x, y, spec, lr, augmentation=PLAIN, rng=None, step=0, sample_ids=None,
                accountant=None, batch_size=None, method="vectorized", noise_key=None):
    """One clipped, noised SGD update in place; returns epsilon spent after the step."""
    if accountant is not None and accountant.epsilon(accountant.steps + 1) > spec.epsilon:
        raise PrivacyBudgetExhausted(accountant.epsilon(accountant.steps + 1), spec.epsilon)
    g = per_sample_gradients(model, x, y, augmentation, rng, step, sample_ids, method=method)
    g = clip_per_sample(g, spec.clip)
    sigma = spec.sigma if spec.sigma is not None else 0.0
    upd = noisy_aggregate(g, spec.clip, sigma, batch_size or len(y), rng, noise_key or ("noise", step))
    if lr != 0:
        model.set_flat(model.get_flat() - lr * upd)
    if accountant is None:
        return math.nan
    return accountant.step()


def make_accountant(spec, orders=DEFAULT_ORDERS):
    return PrivacyAccountant(spec.q, spec.sigma, spec.delta, orders)
