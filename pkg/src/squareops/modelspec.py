"""Declarative network descriptions.

A ModelSpec is an ordered list of layer descriptors (plain dicts, so the
whole thing round-trips through JSON) plus a loss head. Validation is
fail-closed: unknown layer kinds or unknown keys are rejected, and layer
shapes must chain consistently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

POOL_OPS = ("gap", "square", "gem", "moment")
HEADS = ("softmax_ce", "mse")

# permitted keys per layer kind; every kind implicitly allows "kind"
_LAYER_KEYS = {
    "conv": {"k", "stride", "pad", "cin", "cout"},
    "bn": {"ch"},
    "relu": set(),
    "square": set(),
    "relu_square": set(),
    "negate": set(),
    "pool": {"op", "p", "order"},
    "fc": {"din", "dout"},
    "dropout": {"rate"},
    "scale": set(),
    "softmin": {"ch", "shared"},
    "excitation": set(),
    "block": {"main", "shortcut", "excite", "cin", "cout", "stride"},
}


@dataclass
class ModelSpec:
    """Ordered layer descriptors, the loss head, and the variant code that built it."""

    layers: list = field(default_factory=list)
    head: str = "softmax_ce"
    variant: str = "original"
    in_shape: tuple = (32, 32, 3)

    def to_json(self) -> str:
        doc = {
            "layers": self.layers,
            "head": self.head,
            "variant": self.variant,
            "in_shape": list(self.in_shape),
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        doc = json.loads(text)
        extra = set(doc) - {"layers", "head", "variant", "in_shape"}
        if extra:
            raise ValueError(f"unknown model spec keys: {sorted(extra)}")
        spec = cls(layers=doc["layers"], head=doc["head"],
                   variant=doc.get("variant", "original"),
                   in_shape=tuple(doc["in_shape"]))
        validate_spec(spec)
        return spec


def _check_layer(layer: dict) -> None:
    kind = layer.get("kind")
    if kind not in _LAYER_KEYS:
        raise ValueError(f"unknown layer kind {kind!r}")
    extra = set(layer) - _LAYER_KEYS[kind] - {"kind"}
    if extra:
        raise ValueError(f"unknown keys {sorted(extra)} on layer kind {kind!r}")
    if kind == "pool" and layer.get("op") not in POOL_OPS:
        raise ValueError(f"unknown pool op {layer.get('op')!r}")
    if kind == "block":
        for sub in layer["main"]:
            _check_layer(sub)
        if layer.get("shortcut"):
            for sub in layer["shortcut"]:
                _check_layer(sub)


def _chain_shape(layer: dict, shape: tuple) -> tuple:
    """Output shape of one layer given the incoming shape (no batch axis)."""
    kind = layer["kind"]
    if kind == "conv":
        if len(shape) != 3 or shape[2] != layer["cin"]:
            raise ValueError(f"conv expects (H,W,{layer['cin']}), got {shape}")
        h, w, _ = shape
        k, s, p = layer["k"], layer["stride"], layer["pad"]
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"conv output extent {oh}x{ow} is not positive")
        return (oh, ow, layer["cout"])
    if kind == "bn":
        if len(shape) != 3 or shape[2] != layer["ch"]:
            raise ValueError(f"bn expects channel {layer['ch']}, got {shape}")
        return shape
    if kind in ("relu", "square", "relu_square", "negate", "dropout", "scale",
                "excitation"):
        return shape
    if kind == "pool":
        if len(shape) != 3:
            raise ValueError(f"pool expects a feature map, got {shape}")
        return (shape[2],)
    if kind == "fc":
        if shape != (layer["din"],):
            raise ValueError(f"fc expects ({layer['din']},), got {shape}")
        return (layer["dout"],)
    if kind == "softmin":
        if shape != (layer["ch"],):
            raise ValueError(f"softmin expects ({layer['ch']},), got {shape}")
        return shape
    if kind == "block":
        if len(shape) != 3 or shape[2] != layer["cin"]:
            raise ValueError(f"block expects channel {layer['cin']}, got {shape}")
        out = shape
        for sub in layer["main"]:
            out = _chain_shape(sub, out)
        if out[2] != layer["cout"]:
            raise ValueError("block main branch does not produce cout channels")
        return out
    raise ValueError(f"unknown layer kind {kind!r}")


def validate_spec(spec: ModelSpec) -> tuple:
    """Check kinds, keys, head, pooling-head count, and shape chaining.

    Returns the output shape (no batch axis).
    """
    if spec.head not in HEADS:
        raise ValueError(f"unknown head {spec.head!r}")
    pools = sum(1 for l in spec.layers if l.get("kind") == "pool")
    if pools > 1:
        raise ValueError(f"at most one pooling head allowed, found {pools}")
    shape = tuple(spec.in_shape)
    for layer in spec.layers:
        _check_layer(layer)
        shape = _chain_shape(layer, shape)
    return shape


def _layer_param_count(layer: dict) -> int:
    kind = layer["kind"]
    if kind == "conv":
        return layer["k"] * layer["k"] * layer["cin"] * layer["cout"]
    if kind == "bn":
        return 2 * layer["ch"]
    if kind == "fc":
        return layer["din"] * layer["dout"] + layer["dout"]
    if kind == "scale":
        return 1
    if kind == "softmin":
        return 1 if layer.get("shared") else layer["ch"]
    if kind == "excitation":
        return 1
    if kind == "block":
        n = sum(_layer_param_count(sub) for sub in layer["main"])
        if layer.get("shortcut"):
            n += sum(_layer_param_count(sub) for sub in layer["shortcut"])
        if layer.get("excite") is True:
            n += 1
        return n
    return 0


def param_count(spec: ModelSpec) -> int:
    """Number of learnable scalars in the model (running stats excluded)."""
    total = sum(_layer_param_count(l) for l in spec.layers)
    if any(l.get("kind") == "block" and l.get("excite") == "shared" for l in spec.layers):
        total += 1  # one alpha shared by every excited block
    return total


def flatten_kinds(spec: ModelSpec) -> list:
    """Flat list of layer kinds (blocks expanded), for structural diffs."""
    out = []

    def walk(layers, prefix):
        for layer in layers:
            kind = layer["kind"]
            if kind == "block":
                out.append(f"{prefix}block[")
                walk(layer["main"], prefix + "main.")
                if layer.get("excite"):
                    out.append(f"{prefix}excitation")
                if layer.get("shortcut"):
                    out.append(f"{prefix}shortcut[")
                    walk(layer["shortcut"], prefix + "sc.")
                    out.append(f"{prefix}]")
                out.append(f"{prefix}]")
            else:
                out.append(prefix + kind)

    walk(spec.layers, "")
    return out
