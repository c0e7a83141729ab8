"""Self-describing model checkpoint container (.npz + embedded JSON meta).

Holds the config echo, layer specs, named parameter tensors, per-group
quantizer specs, optimizer state and RNG state: enough to resume a
deterministic run bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from ..quantizer import QuantizerSpec


@dataclass
class Checkpoint:
    layer_cfgs: list[dict]
    params: dict[str, np.ndarray]
    specs: dict[str, QuantizerSpec] = field(default_factory=dict)
    opt_state: dict = field(default_factory=dict)
    rng_state: dict | None = None
    config_echo: dict = field(default_factory=dict)


def _flatten_arrays(prefix: str, obj, out: dict):
    """Pull ndarrays out of nested dicts into `out`, leaving placeholders."""
    if isinstance(obj, np.ndarray):
        key = f"{prefix}"
        out[key] = obj
        return {"__array__": key}
    if isinstance(obj, dict):
        return {k: _flatten_arrays(f"{prefix}/{k}", v, out) for k, v in obj.items()}
    return obj


def _restore_arrays(obj, arrays: dict):
    if isinstance(obj, dict):
        if set(obj) == {"__array__"}:
            return arrays[obj["__array__"]]
        return {k: _restore_arrays(v, arrays) for k, v in obj.items()}
    return obj


def save_checkpoint(path, ckpt: Checkpoint):
    arrays = {}
    for name, arr in ckpt.params.items():
        arrays[f"param/{name}"] = arr
    opt_meta = _flatten_arrays("opt", ckpt.opt_state, arrays)
    meta = {
        "layer_cfgs": ckpt.layer_cfgs,
        "param_names": sorted(ckpt.params),
        "param_dtypes": {k: str(v.dtype) for k, v in ckpt.params.items()},
        "specs": {
            gid: {"bits": s.bits, "points": s.points, "step": s.step}
            for gid, s in ckpt.specs.items()
        },
        "opt_state": opt_meta,
        "rng_state": ckpt.rng_state,
        "config_echo": ckpt.config_echo,
    }
    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    np.savez(path, **arrays)


def load_checkpoint(path) -> Checkpoint:
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(bytes(arrays.pop("__meta__")).decode("utf-8"))
    params = {
        name: arrays[f"param/{name}"].astype(meta["param_dtypes"][name])
        for name in meta["param_names"]
    }
    specs = {
        gid: QuantizerSpec(bits=s["bits"], points=s["points"], step=s["step"])
        for gid, s in meta["specs"].items()
    }
    opt_state = _restore_arrays(meta["opt_state"], arrays)
    return Checkpoint(
        layer_cfgs=meta["layer_cfgs"],
        params=params,
        specs=specs,
        opt_state=opt_state,
        rng_state=meta["rng_state"],
        config_echo=meta["config_echo"],
    )
