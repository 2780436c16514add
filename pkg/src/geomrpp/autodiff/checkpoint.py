"""JSON checkpoints: parameter path -> shape + base64 little-endian float64."""
from __future__ import annotations

import base64
import json
from typing import Any, Dict, Optional

import numpy as np

from .nn import Module

FORMAT = "geomrpp-checkpoint"
VERSION = 1


def encode_array(a: np.ndarray) -> Dict[str, Any]:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: Dict[str, Any]) -> np.ndarray:
    buf = np.frombuffer(base64.b64decode(d["data"]), dtype="<f8")
    return buf.reshape(d["shape"]).astype(np.float64)


def checkpoint_dict(model: Module, header: Optional[Dict[str, Any]] = None,
                    optimizer=None, rng_state: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    out: Dict[str, Any] = {"format": FORMAT, "version": VERSION, "header": header or {}}
    out["params"] = {name: encode_array(p.data) for name, p in model.named_parameters()}
    out["buffers"] = {name: None if b is None else encode_array(b)
                      for name, b in model.named_buffers()}
    if optimizer is not None:
        out["optimizer"] = {
            "hyper": optimizer.state(),
            "moments": {name: {"m": encode_array(p.m), "v": encode_array(p.v), "step": p.step}
                        for name, p in model.named_parameters()},
        }
    if rng_state is not None:
        out["rng"] = rng_state
    return out


def save_checkpoint(path: str, model: Module, header: Optional[Dict[str, Any]] = None,
                    optimizer=None, rng_state: Optional[Dict[str, Any]] = None) -> None:
    with open(path, "w") as fh:
        json.dump(checkpoint_dict(model, header, optimizer, rng_state), fh, sort_keys=True)


def read_checkpoint(path: str) -> Dict[str, Any]:
    with open(path) as fh:
        ck = json.load(fh)
    if ck.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} file")
    if ck.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {ck.get('version')}")
    return ck


def load_into(model: Module, ck: Dict[str, Any]) -> None:
    model.load_state_dict({k: decode_array(v) for k, v in ck["params"].items()})
    for name, buf in ck.get("buffers", {}).items():
        model.set_buffer(name, None if buf is None else decode_array(buf))
    moments = ck.get("optimizer", {}).get("moments", {})
    for name, p in model.named_parameters():
        if name in moments:
            p.m = decode_array(moments[name]["m"])
            p.v = decode_array(moments[name]["v"])
            p.step = int(moments[name]["step"])
