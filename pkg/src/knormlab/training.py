"""SGD/DP-SGD epochs, evaluation and the learning-rate schedule.

Shuffling uses the stream ``("shuffle", epoch, client)``; a centralized run is
client 0 holding every index, which is what makes single-client FedAvg and
centralized SGD produce the same trajectory.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import GradTape
from .dp import PLAIN, AugmentationPolicy, PrivacySpec, dp_sgd_step
from .layers import Context


def default_milestones(total_epochs):
    return [max(0, total_epochs - 30), max(0, total_epochs - 10)]


def lr_at(epoch, base_lr, total_epochs=None, milestones="auto"):
    """Step decay: the rate halves at every milestone already reached."""
    if milestones in ("auto", None):
        milestones = default_milestones(total_epochs)
    elif milestones == "none":
        milestones = []
    k = sum(1 for m in milestones if epoch >= m)
    return base_lr / (2.0**k)


@dataclass
class TrainSettings:
    lr: float = 0.1
    batch_size: int = 64
    epochs: int = 1
    milestones: object = "none"
    privacy: PrivacySpec = None
    augmentation: AugmentationPolicy = field(default_factory=lambda: PLAIN)
    psg_method: str = "vectorized"
    eval_batch: int = 500

    @property
    def dp(self):
        return self.privacy is not None


def evaluate(model, images, labels, batch=500):
    """Mean cross-entropy and accuracy in eval mode (dropout off)."""
    n = len(labels)
    if n == 0:
        return math.nan, math.nan
    ctx = Context(training=False)
    loss_sum = 0.0
    correct = 0
    for s in range(0, n, batch):
        xb = np.asarray(images[s : s + batch], dtype=model.dtype)
        yb = labels[s : s + batch]
        logits = model(xb, ctx)
        loss_sum += ops.softmax_cross_entropy(logits, yb, reduction="sum").item()
        correct += int((logits.data.argmax(axis=1) == yb).sum())
    return loss_sum / n, correct / n


def sgd_step(model, xb, yb, lr, rng, step, sample_ids):
    ctx = Context(training=True, rng=rng, step=step, sample_ids=sample_ids)
    with GradTape() as tape:
        loss = ops.softmax_cross_entropy(model(xb, ctx), yb)
    grads = tape.backward(loss, model.parameters())
    if lr != 0:
        for name, p in model.params.items():
            p.data = p.data - lr * grads[name]
    return loss.item()


def local_epochs(model, images, labels, indices, settings, rng, epoch0, n_epochs, client=0, step0=0,
                 accountant=None):
    """Train ``model`` in place for ``n_epochs`` over ``indices``.

    Returns the step counter after training.  ``epoch0`` is the global epoch
    index of the first epoch here; it keys both shuffling and the schedule.
    """
    indices = np.asarray(indices, dtype=np.int64)
    step = step0
    b = settings.batch_size
    for e in range(epoch0, epoch0 + n_epochs):
        lr = lr_at(e, settings.lr, settings.epochs, settings.milestones)
        order = rng.stream("shuffle", e, client).permutation(indices)
        for s in range(0, len(order), b):
            ids = order[s : s + b]
            xb = np.asarray(images[ids], dtype=model.dtype)
            yb = labels[ids]
            if settings.dp:
                dp_sgd_step(model, xb, yb, settings.privacy, lr, settings.augmentation, rng, step, ids,
                            accountant=accountant, method=settings.psg_method, noise_key=("noise", client, step))
            else:
                sgd_step(model, xb, yb, lr, rng, step, ids)
            step += 1
    return step


def steps_per_epoch(n, batch_size):
    return -(-n // batch_size)
