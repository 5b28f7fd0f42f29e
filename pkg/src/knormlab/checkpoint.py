"""Checkpoints: ``model.bin`` holds every parameter tensor back to back as
little-endian floats in registry order; ``manifest.json`` lists names, shapes,
byte offsets, dtype, norm kind, seed and the model spec needed to rebuild."""

import json
import os

import numpy as np

from .errors import ContractError
from .layers import ModelGraph

FORMAT = "knormlab-checkpoint-1"


def save_checkpoint(model, directory, seed=None, extra=None):
    os.makedirs(directory, exist_ok=True)
    dt = np.dtype(model.dtype).newbyteorder("<")
    tensors = []
    offset = 0
    with open(os.path.join(directory, "model.bin"), "wb") as fh:
        for name, p in model.params.items():
            raw = np.ascontiguousarray(p.data, dtype=dt).tobytes()
            fh.write(raw)
            tensors.append({"name": name, "shape": list(p.data.shape), "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {
        "format": FORMAT,
        "dtype": np.dtype(model.dtype).name,
        "byteorder": "little",
        "norm_kind": model.meta.get("norm_kind"),
        "seed": model.seed if seed is None else seed,
        "total_bytes": offset,
        "tensors": tensors,
        "model": model.to_dict(),
    }
    if extra:
        manifest["extra"] = extra
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_checkpoint(directory):
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT:
        raise ContractError(f"{directory}: unknown checkpoint format {manifest.get('format')!r}")
    model = ModelGraph.from_dict(manifest["model"])
    dt = np.dtype(manifest["dtype"]).newbyteorder("<")
    with open(os.path.join(directory, "model.bin"), "rb") as fh:
        raw = fh.read()
    if len(raw) != manifest["total_bytes"]:
        raise ContractError(f"{directory}/model.bin: {len(raw)} bytes, manifest says {manifest['total_bytes']}")
    for t in manifest["tensors"]:
        if t["name"] not in model.params:
            raise ContractError(f"checkpoint tensor {t['name']!r} not in the rebuilt model")
        p = model.params[t["name"]]
        arr = np.frombuffer(raw, dtype=dt, count=t["nbytes"] // dt.itemsize, offset=t["offset"])
        arr = arr.reshape(t["shape"]).astype(model.dtype)
        if arr.shape != p.data.shape:
            raise ContractError(f"{t['name']}: shape {arr.shape} vs model {p.data.shape}")
        p.data = arr
    return model, manifest
