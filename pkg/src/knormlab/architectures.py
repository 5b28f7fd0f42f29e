"""Model builders: KNResNet-13, VGG-6 and ResNet-8, each parameterized by norm kind.

For ``norm_kind="kernel"`` convolutions become KNConv layers and no per-layer
norm is inserted.  For ``layer``/``group``/``none`` every convolution is
followed by LayerNorm, GroupNorm or the identity.
"""

import json

import numpy as np

from . import ops
from .autodiff import Tensor
from .errors import ConfigError
from .layers import NORM_KINDS, BlockSpec, Context, LayerSpec, ModelGraph

KNRESNET13_WIDTHS = (64, 128, 256, 256)
VGG6_WIDTHS = (32, 64, 128, 128)
VGG6_HIDDEN = 128
RESNET8_WIDTHS = (16, 32, 64)


class _Conv:
    """Emits conv(+norm) LayerSpecs for one norm kind."""

    def __init__(self, norm_kind, knconv_dropout=0.1, group_size=32, eps=1e-5, rescale=False,
                 pad_in_stats=True):
        if norm_kind not in NORM_KINDS:
            raise ConfigError(f"unknown norm kind {norm_kind!r}; expected one of {NORM_KINDS}")
        self.norm_kind = norm_kind
        self.p = knconv_dropout
        self.group_size = group_size
        self.eps = eps
        self.rescale = rescale
        self.pad_in_stats = pad_in_stats

    def __call__(self, cin, cout, kernel=3, stride=1, padding=1):
        base = {"in_channels": cin, "out_channels": cout, "kernel": kernel, "stride": stride, "padding": padding}
        if self.norm_kind == "kernel":
            base.update(dropout=self.p, eps=self.eps, rescale=self.rescale, pad_in_stats=self.pad_in_stats)
            return [LayerSpec("knconv", base)]
        conv = LayerSpec("conv", base)
        if self.norm_kind == "layer":
            return [conv, LayerSpec("layernorm", {"channels": cout, "eps": self.eps})]
        if self.norm_kind == "group":
            if cout % self.group_size:
                raise ConfigError(f"GroupNorm: {cout} channels not divisible by group size {self.group_size}")
            return [conv, LayerSpec("groupnorm", {"channels": cout, "group_size": self.group_size, "eps": self.eps})]
        return [conv, LayerSpec("identity")]


def _act(name):
    return LayerSpec(name)


def build_knresnet13(num_classes=10, channel_schedule=KNRESNET13_WIDTHS, norm_kind="kernel",
                     input_resolution="low", activation="mish", knconv_dropout=0.1,
                     kernelnorm_dropout=0.5, head_kernel=(2, 2), in_channels=3, image_size=None,
                     group_size=32, eps=1e-5, rescale=False, pad_in_stats=True, residual_post_act=True,
                     seed=0, dtype=np.float64):
    """Stem, three (residual, transitional) pairs, a final residual block, and the head.

    Twelve conv layers in total; the head is KernelNorm -> activation -> 2x2
    adaptive average pool -> flatten -> linear.
    """
    widths = tuple(int(w) for w in channel_schedule)
    if len(widths) != 4:
        raise ConfigError(f"KNResNet-13 needs 4 stage widths, got {len(widths)}")
    if input_resolution not in ("low", "medium"):
        raise ConfigError(f"input_resolution must be 'low' or 'medium', got {input_resolution!r}")
    conv = _Conv(norm_kind, knconv_dropout, group_size, eps, rescale, pad_in_stats)
    act = activation
    blocks = []
    if input_resolution == "low":
        stem = conv(in_channels, widths[0]) + [_act(act)]
    else:
        stem = conv(in_channels, widths[0], kernel=7, stride=2, padding=3) + [_act(act), LayerSpec("maxpool", {"kernel": 2})]
    blocks.append(BlockSpec("stem", in_channels, widths[0], norm_kind, act, stem))

    def residual(w):
        body = conv(w, w) + [_act(act)] + conv(w, w)
        if residual_post_act:
            return BlockSpec("residual", w, w, norm_kind, act, body, shortcut=None, post_activation=act)
        return BlockSpec("residual", w, w, norm_kind, act, body + [_act(act)], shortcut=None)

    for i in range(3):
        blocks.append(residual(widths[i]))
        tl = conv(widths[i], widths[i + 1]) + [_act(act), LayerSpec("maxpool", {"kernel": 2})]
        blocks.append(BlockSpec("transitional", widths[i], widths[i + 1], norm_kind, act, tl))
    blocks.append(residual(widths[3]))

    head = []
    if norm_kind == "kernel":
        head.append(LayerSpec("kernelnorm", {"kernel": tuple(head_kernel), "stride": tuple(head_kernel),
                                             "dropout": kernelnorm_dropout, "eps": eps, "rescale": rescale}))
    head += [_act(act), LayerSpec("adaptive_avgpool", {"output": (2, 2)}), LayerSpec("flatten"),
             LayerSpec("linear", {"in_features": widths[3] * 4, "out_features": num_classes})]
    blocks.append(BlockSpec("head", widths[3], num_classes, norm_kind, act, head))

    size = image_size or (32 if input_resolution == "low" else 224)
    final = size // 8 if input_resolution == "low" else ((size + 1) // 2) // 16
    if norm_kind == "kernel" and final < head_kernel[0]:
        raise ConfigError(f"image size {size} leaves a {final}x{final} map, smaller than the "
                          f"{head_kernel[0]}x{head_kernel[1]} head KernelNorm window")
    return ModelGraph("knresnet13", blocks, num_classes, (1, in_channels, size, size), seed, dtype,
                      meta={"norm_kind": norm_kind, "widths": list(widths), "resolution": input_resolution})


def build_vgg6(num_classes=10, norm_kind="none", widths=VGG6_WIDTHS, hidden=VGG6_HIDDEN, activation="relu",
               knconv_dropout=0.1, in_channels=3, image_size=32, group_size=32, eps=1e-5, rescale=False,
               pad_in_stats=True, seed=0, dtype=np.float64):
    """Four 3x3 conv layers (pooling after the 1st, 2nd and 4th) and two linear layers."""
    widths = tuple(int(w) for w in widths)
    if len(widths) != 4:
        raise ConfigError(f"VGG-6 needs 4 conv widths, got {len(widths)}")
    conv = _Conv(norm_kind, knconv_dropout, group_size, eps, rescale, pad_in_stats)
    act = activation
    blocks = []
    cin = in_channels
    for i, w in enumerate(widths):
        layers = conv(cin, w) + [_act(act)]
        if i in (0, 1, 3):
            layers.append(LayerSpec("maxpool", {"kernel": 2}))
        blocks.append(BlockSpec("stem" if i == 0 else "transitional", cin, w, norm_kind, act, layers))
        cin = w
    head = [LayerSpec("adaptive_avgpool", {"output": (2, 2)}), LayerSpec("flatten"),
            LayerSpec("linear", {"in_features": widths[-1] * 4, "out_features": hidden}), _act(act),
            LayerSpec("linear", {"in_features": hidden, "out_features": num_classes})]
    blocks.append(BlockSpec("head", widths[-1], num_classes, norm_kind, act, head))
    return ModelGraph("vgg6", blocks, num_classes, (1, in_channels, image_size, image_size), seed, dtype,
                      meta={"norm_kind": norm_kind, "widths": list(widths), "hidden": hidden})


def build_resnet8(num_classes=10, norm_kind="none", widths=RESNET8_WIDTHS, activation="relu",
                  knconv_dropout=0.1, kernelnorm_dropout=0.25, head_kernel=(2, 2), in_channels=3,
                  image_size=32, group_size=None, eps=1e-5, rescale=False, pad_in_stats=True, seed=0,
                  dtype=np.float64):
    """3x3 stem plus one residual block per stage (stride 2 and 1x1 shortcut at width changes)."""
    widths = tuple(int(w) for w in widths)
    if len(widths) != 3:
        raise ConfigError(f"ResNet-8 needs 3 stage widths, got {len(widths)}")
    gs = group_size if group_size is not None else min(32, min(widths))
    conv = _Conv(norm_kind, knconv_dropout, gs, eps, rescale, pad_in_stats)
    act = activation
    blocks = [BlockSpec("stem", in_channels, widths[0], norm_kind, act, conv(in_channels, widths[0]) + [_act(act)])]
    cin = widths[0]
    for i, w in enumerate(widths):
        stride = 1 if i == 0 else 2
        body = conv(cin, w, stride=stride) + [_act(act)] + conv(w, w)
        short = None
        if stride != 1 or cin != w:
            short = conv(cin, w, kernel=1, stride=stride, padding=0)
        blocks.append(BlockSpec("residual", cin, w, norm_kind, act, body, shortcut=short, post_activation=act))
        cin = w
    head = []
    if norm_kind == "kernel":
        head.append(LayerSpec("kernelnorm", {"kernel": tuple(head_kernel), "stride": tuple(head_kernel),
                                             "dropout": kernelnorm_dropout, "eps": eps, "rescale": rescale}))
    head += [LayerSpec("adaptive_avgpool", {"output": (1, 1)}), LayerSpec("flatten"),
             LayerSpec("linear", {"in_features": widths[-1], "out_features": num_classes})]
    blocks.append(BlockSpec("head", widths[-1], num_classes, norm_kind, act, head))
    return ModelGraph("resnet8", blocks, num_classes, (1, in_channels, image_size, image_size), seed, dtype,
                      meta={"norm_kind": norm_kind, "widths": list(widths)})


BUILDERS = {"knresnet13": build_knresnet13, "vgg6": build_vgg6, "resnet8": build_resnet8}


def count_layers(model, kind):
    return sum(1 for k in model.layer_kinds() if k == kind)


def describe(model):
    """Per-layer kinds, key hyperparameters, output shapes and parameter counts."""
    x = np.zeros(model.input_shape, dtype=model.dtype)
    ctx = Context(training=False)
    rows = []
    t = Tensor(x)
    for bi, (b, body, short, post) in enumerate(model.compiled):
        inp = t
        for m in body:
            t = m.forward(t, ctx)
            rows.append(_row(bi, b, "body", m, t))
        if b.kind == "residual":
            s = inp
            for m in short:
                s = m.forward(s, ctx)
                rows.append(_row(bi, b, "shortcut", m, s))
            t = ops.add(t, s)
        for m in post:
            t = m.forward(t, ctx)
            rows.append(_row(bi, b, "post", m, t))
    return {
        "name": model.name,
        "num_classes": model.num_classes,
        "input_shape": list(model.input_shape),
        "norm_kind": model.meta.get("norm_kind"),
        "total_params": model.n_params(),
        "conv_layers": count_layers(model, "conv") + count_layers(model, "knconv"),
        "linear_layers": count_layers(model, "linear"),
        "layers": rows,
        "spec": model.to_dict(),
    }


def _row(bi, block, part, mod, out):
    r = {"block": bi, "block_kind": block.kind, "part": part, "kind": mod.kind,
         "output_shape": list(out.shape), "params": mod.n_params()}
    for key in ("kernel", "stride", "padding", "dropout", "in_channels", "out_channels"):
        if key in mod.spec.args:
            v = mod.spec.args[key]
            r[key] = list(v) if isinstance(v, tuple) else v
    if "kernel" in r and not isinstance(r["kernel"], list):
        r["kernel"] = [r["kernel"], r["kernel"]]
    return r


def describe_json(model, indent=2):
    return json.dumps(describe(model), indent=indent, sort_keys=True)
