"""Datasets: CIFAR-10 binary ingestion, synthetic blobs, preprocessing and augmentation."""

import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError, IngestionError
from .rng import Rng

log = logging.getLogger(__name__)

CIFAR_RECORD = 3073
CIFAR_PER_FILE = 10000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W)
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    provenance: str = "raw"
    num_classes: int = 10
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ContractError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, images=self.images[idx], labels=self.labels[idx])


# --------------------------------------------------------------------------
# CIFAR-10


def decode_cifar_records(raw, source="<bytes>", num_classes=10):
    """Decode concatenated 3073-byte records into (images in [0,1], labels)."""
    buf = np.frombuffer(raw, dtype=np.uint8)
    if buf.size % CIFAR_RECORD:
        raise IngestionError(
            f"{source}: size {buf.size} is not a multiple of the {CIFAR_RECORD}-byte record "
            f"(trailing record starts at byte {buf.size - buf.size % CIFAR_RECORD})"
        )
    rec = buf.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= num_classes)[0]
    if bad.size:
        k = int(bad[0])
        raise IngestionError(f"{source}: label {labels[k]} >= {num_classes} at byte offset {k * CIFAR_RECORD}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return images, labels


def _read_cifar_file(path, expect_records=CIFAR_PER_FILE):
    if not os.path.exists(path):
        raise IngestionError(f"{path}: missing")
    size = os.path.getsize(path)
    expected = expect_records * CIFAR_RECORD
    if size != expected:
        raise IngestionError(f"{path}: {size} bytes, expected {expected} ({expect_records} records of {CIFAR_RECORD})")
    with open(path, "rb") as fh:
        return decode_cifar_records(fh.read(), path)


def load_cifar10_binary(directory):
    """The five train batches and the test batch, pixels divided by 255."""
    sub = os.path.join(directory, "cifar-10-batches-bin")
    if not os.path.exists(os.path.join(directory, CIFAR_TEST_FILE)) and os.path.isdir(sub):
        directory = sub
    parts = [_read_cifar_file(os.path.join(directory, f)) for f in CIFAR_TRAIN_FILES]
    tr_x = np.concatenate([p[0] for p in parts])
    tr_y = np.concatenate([p[1] for p in parts])
    te_x, te_y = _read_cifar_file(os.path.join(directory, CIFAR_TEST_FILE))
    return (Dataset(tr_x, tr_y, "train", "scaled"), Dataset(te_x, te_y, "test", "scaled"))


def balanced_subset(ds, size, seed, stream="subset"):
    """Class-balanced seeded subset of ``size`` samples (returned sorted by index)."""
    if size <= 0 or size >= len(ds):
        return ds
    classes = np.unique(ds.labels)
    per = size // len(classes)
    extra = size - per * len(classes)
    gen = Rng(seed).stream(stream, ds.split)
    keep = []
    for i, c in enumerate(classes):
        idx = np.nonzero(ds.labels == c)[0]
        take = per + (1 if i < extra else 0)
        keep.append(gen.permutation(idx)[:take])
    return ds.subset(np.sort(np.concatenate(keep)))


# --------------------------------------------------------------------------
# synthetic


def _smooth_pattern(gen, shape, cells=4):
    c, h, w = shape
    coarse = gen.normal(size=(c, cells, cells))
    ys = (np.arange(h) + 0.5) * cells / h - 0.5
    xs = (np.arange(w) + 0.5) * cells / w - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, cells - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, cells - 1)
    y1 = np.minimum(y0 + 1, cells - 1)
    x1 = np.minimum(x0 + 1, cells - 1)
    fy = np.clip(ys - y0, 0, 1)[:, None]
    fx = np.clip(xs - x0, 0, 1)[None, :]
    top = coarse[:, y0][:, :, x0] * (1 - fx) + coarse[:, y0][:, :, x1] * fx
    bot = coarse[:, y1][:, :, x0] * (1 - fx) + coarse[:, y1][:, :, x1] * fx
    pat = top * (1 - fy) + bot * fy
    return pat / np.linalg.norm(pat)


def make_synthetic(num_classes, n, shape=(3, 16, 16), seed=0, margin=8.0, split="train", noise=1.0):
    """Gaussian class blobs rendered as images in [0, 1].

    Class centres are smooth random patterns placed ``margin`` noise standard
    deviations apart (along unit directions); pixel noise is i.i.d. Gaussian.
    Centres depend on ``seed`` only, so train and test splits share them.
    """
    shape = tuple(int(s) for s in shape)
    rng = Rng(seed)
    cg = rng.stream("synthetic-centres")
    centres = np.stack([_smooth_pattern(cg, shape) for _ in range(num_classes)]) * (margin / np.sqrt(2.0))
    gen = rng.stream("synthetic", split)
    labels = np.arange(n, dtype=np.int64) % num_classes
    labels = gen.permutation(labels) if n else labels
    z = centres[labels] + noise * gen.normal(size=(n,) + shape)
    images = np.clip(0.5 + 0.08 * z, 0.0, 1.0)
    return Dataset(images, labels, split, "scaled", num_classes, {"centres": 0.5 + 0.08 * centres})


# --------------------------------------------------------------------------
# preprocessing


def channel_stats(ds):
    return ds.images.mean(axis=(0, 2, 3)), ds.images.std(axis=(0, 2, 3))


def preprocess(ds, mode="scale_only", mean=None, std=None):
    """``scale_only`` keeps [0,1] pixels; ``standardize`` maps each channel to (x - mean) / std."""
    if mode == "scale_only":
        if ds.provenance not in ("scaled", "raw"):
            raise ContractError(f"cannot scale a dataset with provenance {ds.provenance!r}")
        return replace(ds, provenance="scaled")
    if mode != "standardize":
        raise ContractError(f"unknown preprocessing mode {mode!r}")
    if mean is None or std is None:
        raise ContractError("standardize needs per-channel mean and std (computed from the train split)")
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if np.any(std == 0):
        raise ContractError(f"standardize: zero std in channel(s) {np.nonzero(std == 0)[0].tolist()}")
    imgs = (ds.images - mean[None, :, None, None]) / std[None, :, None, None]
    return replace(ds, images=imgs, provenance="standardized", stats={"mean": mean, "std": std})


def unstandardize(ds):
    mean, std = ds.stats["mean"], ds.stats["std"]
    return replace(ds, images=ds.images * std[None, :, None, None] + mean[None, :, None, None], provenance="scaled")


# --------------------------------------------------------------------------
# augmentation


TRANSFORMS = ("identity", "hflip", "crop")


def hflip(img):
    return img[..., ::-1].copy()


def crop_at(img, oy, ox, pad=4):
    """Zero-pad by ``pad`` and take the HxW window whose top-left corner is (oy, ox)."""
    c, h, w = img.shape
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=img.dtype)
    padded[:, pad : pad + h, pad : pad + w] = img
    return padded[:, oy : oy + h, ox : ox + w].copy()


def augment(sample, transform, gen=None, pad=4):
    """Apply one named transform to a single (C, H, W) sample."""
    if transform == "identity":
        return sample
    if transform == "hflip":
        return hflip(sample)
    if transform == "crop":
        oy, ox = gen.integers(0, 2 * pad + 1, size=2)
        return crop_at(sample, int(oy), int(ox), pad)
    raise ContractError(f"unknown transform {transform!r}")


def augment_batch(x, transform, rng, key, sample_ids, pad=4):
    if transform == "identity":
        return x
    if transform == "hflip":
        return x[..., ::-1].copy()
    out = np.empty_like(x)
    for i, sid in enumerate(sample_ids):
        out[i] = augment(x[i], transform, rng.stream("augment", *key, int(sid)), pad)
    return out
