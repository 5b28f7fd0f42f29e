"""Config-driven runs: data, model, the four training modes, CSV and checkpoint output."""

import logging
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import data as D
from .architectures import BUILDERS
from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .dp import AugmentationPolicy, PrivacySpec
from .errors import ContractError, KnormlabError
from .fl import FederationConfig, partition_label_shard, run_federation
from .metrics import MetricsRecord, summarize, write_csv
from .rng import Rng
from .training import TrainSettings, evaluate, local_epochs, steps_per_epoch

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    records: list
    model: object
    summary: float
    out_dir: str = None
    epsilon: float = None


def load_datasets(cfg):
    seed = cfg["run.seed"]
    if cfg["data.source"] == "synthetic":
        shape = tuple(cfg["data.shape"])
        kw = dict(num_classes=cfg["data.num_classes"], shape=shape, seed=seed, margin=cfg["data.margin"])
        train = D.make_synthetic(n=cfg["data.synthetic_train"], split="train", **kw)
        test = D.make_synthetic(n=cfg["data.synthetic_test"], split="test", **kw)
    else:
        train, test = D.load_cifar10_binary(cfg["data.path"])
        train = D.balanced_subset(train, cfg["data.train_size"], seed)
        test = D.balanced_subset(test, cfg["data.test_size"], seed)
    mode = cfg.preprocess_mode()
    if mode == "standardize":
        mean, std = D.channel_stats(train)
        train = D.preprocess(train, "standardize", mean, std)
        test = D.preprocess(test, "standardize", mean, std)
    else:
        train, test = D.preprocess(train, "scale_only"), D.preprocess(test, "scale_only")
    return train, test


def default_activation(cfg):
    if cfg["model.activation"] != "auto":
        return cfg["model.activation"]
    if cfg["model.name"] == "knresnet13" or cfg["run.mode"] in ("dp", "dpfl"):
        return "mish"
    return "relu"


def build_model(cfg, in_channels=3, image_size=32, num_classes=10):
    name = cfg["model.name"]
    kw = dict(num_classes=num_classes, norm_kind=cfg["model.norm"], activation=default_activation(cfg),
              knconv_dropout=cfg["model.knconv_dropout"], in_channels=in_channels, image_size=image_size,
              eps=cfg["model.norm_eps"], rescale=cfg["model.rescale_dropout"],
              pad_in_stats=cfg["model.pad_in_stats"], seed=cfg["run.seed"], dtype=np.dtype(cfg["run.dtype"]))
    widths = cfg["model.widths"]
    if widths:
        kw["channel_schedule" if name == "knresnet13" else "widths"] = tuple(widths)
    if cfg["model.group_size"]:
        kw["group_size"] = cfg["model.group_size"]
    if cfg["model.kernelnorm_dropout"] >= 0 and name != "vgg6":
        kw["kernelnorm_dropout"] = cfg["model.kernelnorm_dropout"]
    if name == "vgg6" and cfg["model.hidden"]:
        kw["hidden"] = cfg["model.hidden"]
    if name == "knresnet13":
        kw["input_resolution"] = cfg["model.resolution"]
    return BUILDERS[name](**kw)


def _settings(cfg, milestones):
    return TrainSettings(lr=cfg["optim.lr"], batch_size=cfg["train.batch_size"], epochs=cfg["train.epochs"],
                         milestones=milestones, eval_batch=cfg["train.eval_batch"],
                         augmentation=AugmentationPolicy(cfg["dp.transforms"], cfg["dp.crop_pad"]),
                         psg_method=cfg["dp.method"])


def _privacy(cfg):
    spec = PrivacySpec(cfg["dp.epsilon"], cfg["dp.delta"], cfg["dp.clip"], cfg["dp.sigma"] or None)
    spec.validate()
    return spec


def _central(cfg, model, train, test, rng, dp):
    settings = _settings(cfg, cfg.milestones())
    acct = None
    if dp:
        from .accountant import PrivacyAccountant

        spec = _privacy(cfg)
        spec.validate(len(train))
        spec.q = min(1.0, settings.batch_size / len(train))
        spec.steps = settings.epochs * steps_per_epoch(len(train), settings.batch_size)
        sigma = spec.resolve_sigma() if spec.steps else (spec.sigma or 0.0)
        log.info("DP-SGD: q=%.5f steps=%d sigma=%.4f", spec.q, spec.steps, sigma)
        settings.privacy = spec
        if spec.steps:
            acct = PrivacyAccountant(spec.q, sigma, spec.delta)
    idx = np.arange(len(train))
    records = []
    step = 0
    seed = cfg["run.seed"]
    for e in range(settings.epochs):
        t0 = time.perf_counter()
        step = local_epochs(model, train.images, train.labels, idx, settings, rng, e, 1, client=0, step0=step,
                            accountant=acct)
        wall = time.perf_counter() - t0 if cfg["metrics.wall_clock"] else 0.0
        eps = acct.epsilon() if acct is not None else None
        if cfg["train.eval_train"]:
            loss, acc = evaluate(model, train.images, train.labels, settings.eval_batch)
            records.append(MetricsRecord(e + 1, "train", loss, acc, eps, wall, seed))
        if len(test):
            loss, acc = evaluate(model, test.images, test.labels, settings.eval_batch)
            records.append(MetricsRecord(e + 1, "test", loss, acc, eps, wall, seed))
    return records, (acct.epsilon() if acct is not None else None)


def _federated(cfg, model, train, test, rng, dp):
    settings = _settings(cfg, "none")
    if dp:
        settings.privacy = _privacy(cfg)
    fed = FederationConfig(n_clients=cfg["fl.clients"], selection=cfg["fl.selection"], k_selected=cfg["fl.k"],
                           classes_per_client=cfg["fl.classes_per_client"], local_epochs=cfg["fl.local_epochs"],
                           rounds=cfg["fl.rounds"], mode="dp" if dp else "plain", parallel=cfg["fl.parallel"],
                           workers=_threads(), eval_every=cfg["fl.eval_every"])
    parts = partition_label_shard(train.labels, fed.n_clients, fed.classes_per_client, cfg["run.seed"])
    state = run_federation(model, train, test, parts, fed, settings, rng, cfg["run.seed"], cfg["metrics.wall_clock"])
    eps = max(state.epsilon.values()) if dp and state.epsilon else None
    return state.metrics, eps


def _threads():
    try:
        return max(1, int(os.environ.get("KNORMLAB_THREADS", "1")))
    except ValueError:
        return 1


def train(cfg, out_dir=None, write=True):
    """Run the experiment described by ``cfg``; returns a RunResult."""
    if not isinstance(cfg, ExperimentConfig):
        cfg = ExperimentConfig(cfg)
    cfg.validate()
    mode = cfg["run.mode"]
    out_dir = out_dir or cfg["run.out"]
    train_ds, test_ds = load_datasets(cfg)
    c, h, w = train_ds.images.shape[1:]
    model = build_model(cfg, c, h, int(train_ds.num_classes))
    rng = Rng(cfg["run.seed"])
    try:
        if mode in ("central", "dp"):
            records, eps = _central(cfg, model, train_ds, test_ds, rng, dp=mode == "dp")
        else:
            records, eps = _federated(cfg, model, train_ds, test_ds, rng, dp=mode == "dpfl")
    except KnormlabError as exc:
        exc.args = (f"[{mode} run, model {cfg['model.name']}/{cfg['model.norm']}, seed {cfg['run.seed']}] "
                    + str(exc.args[0] if exc.args else exc),) + exc.args[1:]
        raise
    split = "test" if mode in ("fl", "dpfl") or not cfg["train.eval_train"] else "train"
    summary = summarize(records, mode, "test" if any(r.split == "test" for r in records) else split)
    if write:
        os.makedirs(out_dir, exist_ok=True)
        write_csv(records, os.path.join(out_dir, "metrics.csv"))
        save_checkpoint(model, os.path.join(out_dir, "checkpoint"), cfg["run.seed"])
        with open(os.path.join(out_dir, "config.resolved"), "w") as fh:
            fh.write(cfg.to_text())
    if eps is not None and not math.isfinite(eps):
        raise ContractError("privacy accounting produced a non-finite epsilon")
    return RunResult(records, model, summary, out_dir if write else None, eps)
