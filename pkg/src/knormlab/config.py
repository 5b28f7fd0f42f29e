"""Experiment configuration.

Files are flat ``section.key = value`` lines; ``#`` starts a comment and a
``[section]`` header prefixes the keys below it.  Every key has a typed
default in ``DEFAULTS``; unknown keys are rejected.  Lists are comma
separated.
"""

import logging

from .errors import ConfigError

log = logging.getLogger(__name__)

# key -> (type, default, help)
DEFAULTS = {
    "run.mode": (str, "central", "central | dp | fl | dpfl"),
    "run.seed": (int, 0, "root seed for every random stream"),
    "run.dtype": (str, "float64", "float64 | float32"),
    "run.out": (str, "runs/default", "output directory"),
    "model.name": (str, "knresnet13", "knresnet13 | vgg6 | resnet8"),
    "model.norm": (str, "kernel", "kernel | layer | group | none"),
    "model.widths": ("ints", (), "channel widths; empty = builder default"),
    "model.hidden": (int, 0, "vgg6 hidden width; 0 = default"),
    "model.activation": (str, "auto", "auto | relu | mish"),
    "model.resolution": (str, "low", "knresnet13 stem: low | medium"),
    "model.group_size": (int, 0, "channels per group for groupnorm; 0 = default"),
    "model.knconv_dropout": (float, 0.1, "dropout probability inside KNConv"),
    "model.kernelnorm_dropout": (float, -1.0, "head KernelNorm dropout; negative = builder default"),
    "model.norm_eps": (float, 1e-5, "variance epsilon"),
    "model.rescale_dropout": (bool, False, "divide kept entries by 1-p before statistics"),
    "model.pad_in_stats": (bool, True, "zero padding counts toward KNConv statistics"),
    "data.source": (str, "synthetic", "synthetic | cifar10"),
    "data.path": (str, "", "CIFAR-10 binary directory"),
    "data.train_size": (int, 0, "class-balanced train subset; 0 = all"),
    "data.test_size": (int, 0, "class-balanced test subset; 0 = all"),
    "data.preprocess": (str, "auto", "auto | scale_only | standardize"),
    "data.num_classes": (int, 2, "synthetic classes"),
    "data.synthetic_train": (int, 512, "synthetic train samples"),
    "data.synthetic_test": (int, 256, "synthetic test samples"),
    "data.shape": ("ints", (3, 16, 16), "synthetic sample shape"),
    "data.margin": (float, 8.0, "synthetic class separation in noise std units"),
    "optim.lr": (float, 0.1, "base learning rate"),
    "optim.momentum": (float, 0.0, "must be 0"),
    "train.epochs": (int, 10, "epochs (central, dp)"),
    "train.milestones": (str, "auto", "auto | none | comma-separated epochs"),
    "train.batch_size": (int, 64, "mini-batch size"),
    "train.eval_train": (bool, True, "also evaluate on the train split each epoch"),
    "train.eval_batch": (int, 500, "evaluation batch size"),
    "dp.epsilon": (float, 6.0, "privacy budget"),
    "dp.delta": (float, 1e-5, "privacy delta"),
    "dp.clip": (float, 1.0, "per-sample L2 clipping norm"),
    "dp.sigma": (float, 0.0, "noise multiplier; 0 = calibrate from the budget"),
    "dp.transforms": ("strs", ("identity",), "augmentations averaged per sample"),
    "dp.crop_pad": (int, 4, "random-crop padding"),
    "dp.method": (str, "vectorized", "vectorized | loop"),
    "fl.clients": (int, 10, "number of clients"),
    "fl.selection": (str, "all", "all | sample"),
    "fl.k": (int, 0, "clients sampled per round"),
    "fl.classes_per_client": (int, 2, "label shards per client"),
    "fl.local_epochs": (int, 1, "local epochs per round"),
    "fl.rounds": (int, 10, "communication rounds"),
    "fl.parallel": (bool, False, "train clients on worker threads"),
    "fl.eval_every": (int, 1, "evaluate every n rounds"),
    "metrics.wall_clock": (bool, False, "record real wall seconds (breaks byte-identical CSVs)"),
}

CHOICES = {
    "run.mode": ("central", "dp", "fl", "dpfl"),
    "run.dtype": ("float64", "float32"),
    "model.name": ("knresnet13", "vgg6", "resnet8"),
    "model.norm": ("kernel", "layer", "group", "none"),
    "model.activation": ("auto", "relu", "mish"),
    "model.resolution": ("low", "medium"),
    "data.source": ("synthetic", "cifar10"),
    "data.preprocess": ("auto", "scale_only", "standardize"),
    "dp.method": ("vectorized", "loop"),
    "fl.selection": ("all", "sample"),
}


def _convert(key, raw):
    typ = DEFAULTS[key][0]
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if typ == "strs":
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def parse_text(text, source="<config>"):
    values = {}
    section = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if section and "." not in key:
            key = f"{section}.{key}"
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, val)
    return values


class ExperimentConfig:
    def __init__(self, values=None):
        self.values = {k: v[1] for k, v in DEFAULTS.items()}
        self.explicit = set()
        for k, v in (values or {}).items():
            self.set(k, v)

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            return cls(parse_text(fh.read(), path))

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        if isinstance(value, str) and DEFAULTS[key][0] is not str:
            value = _convert(key, value)
        self.values[key] = value
        self.explicit.add(key)

    def override(self, items):
        for item in items or ():
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            k, v = (s.strip() for s in item.split("=", 1))
            if k not in DEFAULTS:
                raise ConfigError(f"unknown key {k!r}")
            self.set(k, _convert(k, v))
        return self

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def preprocess_mode(self):
        """scale_only for kernel norm, standardize otherwise, unless set explicitly."""
        bound = "scale_only" if self["model.norm"] == "kernel" else "standardize"
        mode = self["data.preprocess"]
        if mode == "auto":
            return bound
        if mode != bound:
            log.warning("preprocessing %r overrides the %r default for norm %r", mode, bound, self["model.norm"])
        return mode

    def validate(self):
        for k, opts in CHOICES.items():
            if self[k] not in opts:
                raise ConfigError(f"{k} = {self[k]!r}; expected one of {opts}")
        if self["optim.momentum"] != 0:
            raise ConfigError("only zero-momentum SGD is supported")
        for k in ("train.batch_size", "fl.clients", "fl.local_epochs", "train.eval_batch"):
            if self[k] < 1:
                raise ConfigError(f"{k} must be >= 1")
        for k in ("train.epochs", "fl.rounds"):
            if self[k] < 0:
                raise ConfigError(f"{k} must be >= 0")
        if self["optim.lr"] < 0:
            raise ConfigError("optim.lr must be non-negative")
        if self["data.source"] == "cifar10" and not self["data.path"]:
            raise ConfigError("data.source = cifar10 needs data.path")
        ms = self["train.milestones"]
        if ms not in ("auto", "none"):
            try:
                [int(v) for v in ms.split(",") if v.strip()]
            except ValueError:
                raise ConfigError(f"train.milestones = {ms!r}") from None
        if self["fl.selection"] == "sample" and not 1 <= self["fl.k"] <= self["fl.clients"]:
            raise ConfigError(f"fl.k = {self['fl.k']} must be in [1, fl.clients]")
        return self

    def milestones(self):
        ms = self["train.milestones"]
        if ms in ("auto", "none"):
            return ms
        return [int(v) for v in ms.split(",") if v.strip()]

    def to_text(self):
        lines = []
        for k in DEFAULTS:
            v = self.values[k]
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


def help_text():
    return "\n".join(f"{k:28s} {DEFAULTS[k][2]} (default {DEFAULTS[k][1]!r})" for k in DEFAULTS)
