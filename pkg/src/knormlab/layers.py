"""Layer modules compiled from declarative specs, and the :class:`ModelGraph` container."""

import copy
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import norm as N
from . import ops
from .autodiff import Parameter, Tensor
from .errors import ConfigError
from .rng import Rng

NORM_KINDS = ("kernel", "layer", "group", "none")
ACTIVATIONS = ("mish", "relu")


@dataclass
class Context:
    """Per-forward state: train/eval mode and the dropout stream key."""

    training: bool = False
    rng: Rng = None
    step: int = 0
    sample_ids: np.ndarray = None


@dataclass
class LayerSpec:
    kind: str
    args: dict = field(default_factory=dict)

    def to_dict(self):
        return {"kind": self.kind, "args": dict(self.args)}

    @classmethod
    def from_dict(cls, d):
        args = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.get("args", {}).items()}
        return cls(d["kind"], args)


@dataclass
class BlockSpec:
    """A group of layers.  Residual blocks add ``shortcut(x)`` (identity when empty)
    to ``layers(x)`` and then apply ``post_activation``."""

    kind: str
    channels_in: int
    channels_out: int
    norm_kind: str
    activation: str
    layers: list
    shortcut: list = None
    post_activation: str = None

    def __post_init__(self):
        if self.kind not in ("stem", "residual", "transitional", "head"):
            raise ConfigError(f"unknown block kind {self.kind!r}")
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError(f"unknown norm kind {self.norm_kind!r}")

    def to_dict(self):
        d = asdict(self)
        d["layers"] = [l.to_dict() for l in self.layers]
        d["shortcut"] = None if self.shortcut is None else [l.to_dict() for l in self.shortcut]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["layers"] = [LayerSpec.from_dict(l) for l in d["layers"]]
        if d.get("shortcut") is not None:
            d["shortcut"] = [LayerSpec.from_dict(l) for l in d["shortcut"]]
        return cls(**d)


# --------------------------------------------------------------------------
# modules


class Module:
    kind = "module"
    dropout_p = 0.0

    def __init__(self, spec, layer_id):
        self.spec = spec
        self.layer_id = layer_id
        self.params = OrderedDict()

    def forward(self, x, ctx):
        raise NotImplementedError

    def n_params(self):
        return int(sum(p.size for p in self.params.values()))


def _uniform(gen, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return gen.uniform(-bound, bound, size=shape).astype(dtype)


class _ConvBase(Module):
    def __init__(self, spec, layer_id, gen, dtype, prefix):
        super().__init__(spec, layer_id)
        a = spec.args
        cin, cout = a["in_channels"], a["out_channels"]
        kh, kw = ops._pair(a.get("kernel", 3))
        self.stride = ops._pair(a.get("stride", 1))
        self.padding = ops._pair(a.get("padding", 0))
        fan_in = cin * kh * kw
        self.weight = Parameter(_uniform(gen, (cout, cin, kh, kw), fan_in, dtype), name=f"{prefix}.weight")
        self.params["weight"] = self.weight
        self.bias = None
        if a.get("bias", True):
            self.bias = Parameter(_uniform(gen, (cout,), fan_in, dtype), name=f"{prefix}.bias")
            self.params["bias"] = self.bias


class Conv2d(_ConvBase):
    kind = "conv"

    def forward(self, x, ctx):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class KNConv2d(_ConvBase):
    kind = "knconv"

    def __init__(self, spec, layer_id, gen, dtype, prefix):
        super().__init__(spec, layer_id, gen, dtype, prefix)
        a = spec.args
        self.dropout_p = float(a.get("dropout", 0.1))
        self.eps = float(a.get("eps", N.DEFAULT_EPS))
        self.rescale = bool(a.get("rescale", False))
        self.pad_in_stats = bool(a.get("pad_in_stats", True))

    def forward(self, x, ctx):
        p = self.dropout_p if ctx.training else 0.0
        return N.knconv(x, self.weight, self.bias, self.stride, self.padding, p, ctx.rng, self.eps,
                        key=(self.layer_id, ctx.step), sample_ids=ctx.sample_ids,
                        rescale=self.rescale, pad_in_stats=self.pad_in_stats)


class KernelNormLayer(Module):
    kind = "kernelnorm"

    def __init__(self, spec, layer_id, gen, dtype, prefix):
        super().__init__(spec, layer_id)
        a = spec.args
        self.kernel = ops._pair(a.get("kernel", 2))
        self.stride = ops._pair(a.get("stride", self.kernel))
        self.dropout_p = float(a.get("dropout", 0.5))
        self.eps = float(a.get("eps", N.DEFAULT_EPS))
        self.rescale = bool(a.get("rescale", False))

    def forward(self, x, ctx):
        p = self.dropout_p if ctx.training else 0.0
        return N.kernelnorm_layer(x, self.kernel, self.stride, p, ctx.rng, self.eps,
                                  key=(self.layer_id, ctx.step), sample_ids=ctx.sample_ids,
                                  rescale=self.rescale)


class _AffineNorm(Module):
    def __init__(self, spec, layer_id, gen, dtype, prefix):
        super().__init__(spec, layer_id)
        c = spec.args["channels"]
        self.eps = float(spec.args.get("eps", N.DEFAULT_EPS))
        self.gamma = Parameter(np.ones(c, dtype=dtype), name=f"{prefix}.gamma")
        self.beta = Parameter(np.zeros(c, dtype=dtype), name=f"{prefix}.beta")
        self.params["gamma"] = self.gamma
        self.params["beta"] = self.beta


class LayerNorm(_AffineNorm):
    kind = "layernorm"

    def forward(self, x, ctx):
        return N.layer_normalize(x, self.gamma, self.beta, self.eps)


class GroupNorm(_AffineNorm):
    kind = "groupnorm"

    def __init__(self, spec, layer_id, gen, dtype, prefix):
        super().__init__(spec, layer_id, gen, dtype, prefix)
        self.group_size = int(spec.args.get("group_size", 32))
        if spec.args["channels"] % self.group_size:
            raise ConfigError(
                f"GroupNorm: {spec.args['channels']} channels not divisible by group size {self.group_size}"
            )

    def forward(self, x, ctx):
        return N.group_normalize(x, self.group_size, self.gamma, self.beta, self.eps)


class Linear(Module):
    kind = "linear"

    def __init__(self, spec, layer_id, gen, dtype, prefix):
        super().__init__(spec, layer_id)
        din, dout = spec.args["in_features"], spec.args["out_features"]
        self.weight = Parameter(_uniform(gen, (dout, din), din, dtype), name=f"{prefix}.weight")
        self.bias = Parameter(_uniform(gen, (dout,), din, dtype), name=f"{prefix}.bias")
        self.params["weight"] = self.weight
        self.params["bias"] = self.bias

    def forward(self, x, ctx):
        return ops.linear(x, self.weight, self.bias)


class _Stateless(Module):
    def __init__(self, spec, layer_id, gen, dtype, prefix):
        super().__init__(spec, layer_id)


class Identity(_Stateless):
    kind = "identity"

    def forward(self, x, ctx):
        return N.no_norm(x)


class Mish(_Stateless):
    kind = "mish"

    def forward(self, x, ctx):
        return ops.mish(x)


class ReLU(_Stateless):
    kind = "relu"

    def forward(self, x, ctx):
        return ops.relu(x)


class MaxPool(_Stateless):
    kind = "maxpool"

    def forward(self, x, ctx):
        return ops.max_pool2d(x, self.spec.args.get("kernel", 2))


class AdaptiveAvgPool(_Stateless):
    kind = "adaptive_avgpool"

    def forward(self, x, ctx):
        oh, ow = ops._pair(self.spec.args.get("output", 1))
        return ops.adaptive_avg_pool2d(x, oh, ow)


class Flatten(_Stateless):
    kind = "flatten"

    def forward(self, x, ctx):
        return ops.flatten(x)


LAYER_TYPES = {
    cls.kind: cls
    for cls in (Conv2d, KNConv2d, KernelNormLayer, LayerNorm, GroupNorm, Linear, Identity, Mish, ReLU,
                MaxPool, AdaptiveAvgPool, Flatten)
}

BATCH_INDEPENDENT = frozenset(LAYER_TYPES)


def activation_spec(name):
    if name not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {name!r}")
    return LayerSpec(name)


# --------------------------------------------------------------------------
# graph


class ModelGraph:
    """Blocks compiled to modules, with a flat parameter registry."""

    def __init__(self, name, blocks, num_classes, input_shape, seed=0, dtype=np.float64, meta=None):
        self.name = name
        self.blocks = list(blocks)
        self.num_classes = int(num_classes)
        self.input_shape = tuple(input_shape)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.meta = dict(meta or {})
        self._compile()

    def _compile(self):
        rng = Rng(self.seed)
        self.params = OrderedDict()
        self.compiled = []
        lid = 0

        def build(specs, prefix):
            nonlocal lid
            mods = []
            for spec in specs:
                cls = LAYER_TYPES.get(spec.kind)
                if cls is None:
                    raise ConfigError(f"unknown layer kind {spec.kind!r}")
                name = f"{prefix}.{len(mods)}.{spec.kind}"
                mod = cls(spec, lid, rng.stream("init", lid), self.dtype, name)
                lid += 1
                for p in mod.params.values():
                    self.params[p.name] = p
                mods.append(mod)
            return mods

        for bi, b in enumerate(self.blocks):
            body = build(b.layers, f"b{bi}")
            short = build(b.shortcut, f"b{bi}.short") if b.shortcut else []
            post = build([activation_spec(b.post_activation)], f"b{bi}.post") if b.post_activation else []
            self.compiled.append((b, body, short, post))

    # -- forward
    def forward(self, x, ctx=None):
        ctx = ctx or Context()
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if ctx.sample_ids is None:
            ctx = copy.copy(ctx)
            ctx.sample_ids = np.arange(x.shape[0])
        for b, body, short, post in self.compiled:
            inp = x
            for m in body:
                x = m.forward(x, ctx)
            if b.kind == "residual":
                s = inp
                for m in short:
                    s = m.forward(s, ctx)
                x = ops.add(x, s)
            for m in post:
                x = m.forward(x, ctx)
        return x

    __call__ = forward

    # -- introspection
    def modules(self):
        for b, body, short, post in self.compiled:
            yield from body
            yield from short
            yield from post

    def layer_kinds(self):
        return [m.kind for m in self.modules()]

    def parameters(self):
        return list(self.params.values())

    def n_params(self):
        return int(sum(p.size for p in self.params.values()))

    def norm_param_count(self):
        return int(sum(m.n_params() for m in self.modules() if m.kind in ("layernorm", "groupnorm")))

    def batch_dependent_layers(self):
        return [m.kind for m in self.modules() if m.kind not in BATCH_INDEPENDENT]

    # -- parameter vectors
    def get_flat(self):
        return np.concatenate([p.data.ravel() for p in self.params.values()])

    def set_flat(self, vec):
        vec = np.asarray(vec)
        if vec.size != self.n_params():
            raise ValueError(f"flat vector has {vec.size} entries, model has {self.n_params()}")
        off = 0
        for p in self.params.values():
            k = p.size
            p.data = vec[off : off + k].reshape(p.shape).astype(self.dtype, copy=True)
            off += k

    def flatten_grads(self, grads, per_sample=False):
        parts = []
        for name, p in self.params.items():
            g = grads[name]
            parts.append(g.reshape(g.shape[0], -1) if per_sample else g.ravel())
        return np.concatenate(parts, axis=1 if per_sample else 0)

    def clone(self):
        other = copy.copy(self)
        other._compile()
        other.set_flat(self.get_flat())
        return other

    # -- serialization
    def to_dict(self):
        return {
            "name": self.name,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "seed": self.seed,
            "dtype": self.dtype.name,
            "meta": self.meta,
            "blocks": [b.to_dict() for b in self.blocks],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], [BlockSpec.from_dict(b) for b in d["blocks"]], d["num_classes"],
                   d["input_shape"], d.get("seed", 0), d.get("dtype", "float64"), d.get("meta"))
