"""Model builders and the layer interpreter.

Builders produce ModelSpecs: the three-conv CNN with every square-placement
variant and pooling override, a small residual network whose blocks can
carry the excitation/encoding modules, and the plain two-layer net used by
the synthetic experiments. `Model` owns the parameters and batchnorm states
for one spec and runs the forward pass on a tape.
"""

from __future__ import annotations

import json

import numpy as np

from . import modules
from .modelspec import ModelSpec, param_count, validate_spec
from .tensor import (BatchNormState, Tensor, add, affine, batchnorm2d,
                     conv2d, dropout, ewise_apply, gap, relu, scale_scalar)

VANILLA_VARIANTS = (
    "original", "ds1", "ds2", "ds3", "ds4",
    "ds5plus", "ds5minus", "ds5splus", "ds5sminus",
    "ds6", "ds7", "ds8",
)
POOL_VARIANTS = ("sp", "gem2", "moment3", "moment4", "moment5", "moment6")
RESNET_FLAGS = ("sp", "ss", "sex", "sen")

_NO_DECAY_KINDS = ("bn", "scale", "softmin", "excitation")  # plus block alphas


def _conv(k, stride, pad, cin, cout) -> dict:
    return {"kind": "conv", "k": k, "stride": stride, "pad": pad, "cin": cin, "cout": cout}


def _bn(ch) -> dict:
    return {"kind": "bn", "ch": ch}


def build_vanilla_cnn(variant: str = "original", num_classes: int = 10,
                      dropout_rate: float = 0.2) -> ModelSpec:
    """Three stride-2 conv stages (32/64/128 channels), pooling, FC head.

    Square-placement variants insert elementwise squares between the numbered
    layers; pooling variants swap the head; the ds5 family edits the logits.
    Dropout goes immediately before the final FC for every variant except
    the original.
    """
    if variant not in VANILLA_VARIANTS + POOL_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")

    squares_at: set = set()
    tail: list = []
    pool: dict = {"kind": "pool", "op": "gap"}
    if variant in ("ds1", "ds2", "ds3", "ds4"):
        squares_at = {int(variant[2])}
    elif variant == "ds5plus":
        tail = [{"kind": "square"}]
    elif variant == "ds5minus":
        tail = [{"kind": "square"}, {"kind": "negate"}]
    elif variant == "ds5splus":
        tail = [{"kind": "scale"}, {"kind": "square"}]
    elif variant == "ds5sminus":
        tail = [{"kind": "scale"}, {"kind": "square"}, {"kind": "negate"}]
    elif variant == "ds6":
        squares_at = {1, 2, 3, 4}
        tail = [{"kind": "square"}]
    elif variant == "ds7":
        squares_at = {1, 2, 3}
    elif variant == "ds8":
        squares_at = {3, 4}
        tail = [{"kind": "square"}]
    elif variant == "sp":
        pool = {"kind": "pool", "op": "square"}
    elif variant == "gem2":
        pool = {"kind": "pool", "op": "gem", "p": 2.0}
    elif variant.startswith("moment"):
        pool = {"kind": "pool", "op": "moment", "order": int(variant[6:])}

    layers: list = []
    for i, (cin, cout) in enumerate([(3, 32), (32, 64), (64, 128)], start=1):
        layers += [_conv(3, 2, 1, cin, cout), _bn(cout), {"kind": "relu"}]
        if i in squares_at:
            layers.append({"kind": "square"})
    layers.append(pool)
    if 4 in squares_at:
        layers.append({"kind": "square"})
    if variant != "original" and dropout_rate > 0:
        layers.append({"kind": "dropout", "rate": dropout_rate})
    layers.append({"kind": "fc", "din": 128, "dout": num_classes})
    layers += tail

    spec = ModelSpec(layers=layers, head="softmax_ce", variant=variant,
                     in_shape=(32, 32, 3))
    validate_spec(spec)
    return spec


def _residual_block(cin, cout, stride, excite) -> dict:
    main = [_conv(3, stride, 1, cin, cout), _bn(cout), {"kind": "relu"},
            _conv(3, 1, 1, cout, cout), _bn(cout)]
    shortcut = None
    if stride != 1 or cin != cout:
        shortcut = [_conv(1, stride, 0, cin, cout), _bn(cout)]
    return {"kind": "block", "cin": cin, "cout": cout, "stride": stride,
            "main": main, "shortcut": shortcut, "excite": excite}


def build_mini_resnet(num_blocks: int = 3, flags=(), num_classes: int = 10,
                      dropout_rate: float = 0.2, shared_softmin: bool = True,
                      shared_excitation: bool = False) -> ModelSpec:
    """Small residual net: stem conv to 16 channels, then 3 stages of
    `num_blocks` basic blocks at widths 16/32/64 with stride-2 transitions.

    flags: sp (square pooling head), ss (softmin after the FC), sex
    (excitation gate on every block's main branch), sen (square-encoding
    wrap on every block).
    """
    flags = set(flags)
    unknown = flags - set(RESNET_FLAGS)
    if unknown:
        raise ValueError(f"unknown mini-resnet flags: {sorted(unknown)}")
    if num_blocks < 1:
        raise ValueError("num_blocks must be >= 1")

    excite = ("shared" if shared_excitation else True) if "sex" in flags else False
    layers: list = [_conv(3, 1, 1, 3, 16), _bn(16), {"kind": "relu"}]
    cin = 16
    for width, first_stride in ((16, 1), (32, 2), (64, 2)):
        for b in range(num_blocks):
            block = _residual_block(cin, width, first_stride if b == 0 else 1, excite)
            if "sen" in flags:
                block = modules.square_encoding_wrap(block)
            layers.append(block)
            cin = width
    layers.append({"kind": "pool", "op": "square" if "sp" in flags else "gap"})
    if flags and dropout_rate > 0:
        layers.append({"kind": "dropout", "rate": dropout_rate})
    layers.append({"kind": "fc", "din": 64, "dout": num_classes})
    if "ss" in flags:
        layers.append({"kind": "softmin", "ch": num_classes, "shared": shared_softmin})

    variant = "plain" if not flags else "_".join(sorted(flags))
    spec = ModelSpec(layers=layers, head="softmax_ce", variant=variant,
                     in_shape=(32, 32, 3))
    validate_spec(spec)
    return spec


def build_two_layer(in_dim: int, hidden: int, out_dim: int,
                    activation: str = "relu") -> ModelSpec:
    """FC -> activation -> FC, no normalization."""
    if activation not in ("relu", "square", "relu_square"):
        raise ValueError(f"unknown activation {activation!r}")
    layers = [{"kind": "fc", "din": in_dim, "dout": hidden},
              {"kind": activation},
              {"kind": "fc", "din": hidden, "dout": out_dim}]
    spec = ModelSpec(layers=layers, head="softmax_ce", variant=f"two_layer_{activation}",
                     in_shape=(in_dim,))
    validate_spec(spec)
    return spec


# ---------------------------------------------------------------------------

class Model:
    """Parameters, batchnorm states, and forward execution for one ModelSpec."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        validate_spec(spec)
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        self.states: dict[str, BatchNormState] = {}
        self.no_decay: set[str] = set()
        self._rng = np.random.default_rng(seed)
        self._init_layers(spec.layers, "L")

    # -- initialization ----------------------------------------------------

    def _param(self, name: str, value: np.ndarray, no_decay: bool = False) -> None:
        self.params[name] = Tensor(value, requires_grad=True)
        if no_decay:
            self.no_decay.add(name)

    def _init_layers(self, layers, prefix) -> None:
        for i, layer in enumerate(layers):
            name = f"{prefix}{i}"
            kind = layer["kind"]
            if kind == "conv":
                fan_in = layer["k"] * layer["k"] * layer["cin"]
                shape = (layer["k"], layer["k"], layer["cin"], layer["cout"])
                self._param(f"{name}.w", self._rng.normal(0.0, np.sqrt(2.0 / fan_in), shape))
            elif kind == "bn":
                ch = layer["ch"]
                self._param(f"{name}.gamma", np.ones(ch), no_decay=True)
                self._param(f"{name}.beta", np.zeros(ch), no_decay=True)
                self.states[name] = BatchNormState.for_channels(ch)
            elif kind == "fc":
                din, dout = layer["din"], layer["dout"]
                self._param(f"{name}.w", self._rng.normal(0.0, np.sqrt(2.0 / din), (din, dout)))
                self._param(f"{name}.b", np.zeros(dout))
            elif kind == "scale":
                self._param(f"{name}.s", np.ones(1), no_decay=True)
            elif kind == "softmin":
                n = 1 if layer.get("shared") else layer["ch"]
                self._param(f"{name}.raw", np.ones(n), no_decay=True)
            elif kind == "excitation":
                self._param(f"{name}.alpha", np.ones(1), no_decay=True)
            elif kind == "block":
                self._init_layers(layer["main"], f"{name}.main.")
                if layer.get("shortcut"):
                    self._init_layers(layer["shortcut"], f"{name}.sc.")
                if layer.get("excite") == "shared":
                    if "excite.alpha" not in self.params:
                        self._param("excite.alpha", np.ones(1), no_decay=True)
                elif layer.get("excite"):
                    self._param(f"{name}.alpha", np.ones(1), no_decay=True)

    # -- forward -----------------------------------------------------------

    def forward(self, x: Tensor, mode: str = "inference",
                rng: np.random.Generator | None = None) -> Tensor:
        """Run the layers on a batch; mode selects batchnorm/dropout behavior."""
        if mode not in ("training", "inference"):
            raise ValueError(f"unknown mode {mode!r}")
        if not isinstance(x, Tensor):
            x = Tensor(x)
        return self._run_layers(self.spec.layers, "L", x, mode, rng)

    def _run_layers(self, layers, prefix, x, mode, rng) -> Tensor:
        for i, layer in enumerate(layers):
            name = f"{prefix}{i}"
            kind = layer["kind"]
            if kind == "conv":
                x = conv2d(x, self.params[f"{name}.w"], layer["stride"], layer["pad"])
            elif kind == "bn":
                state = self.states[name]
                state.mode = mode
                x = batchnorm2d(x, self.params[f"{name}.gamma"],
                                self.params[f"{name}.beta"], state)
            elif kind in ("relu", "square", "relu_square", "negate"):
                x = ewise_apply(kind, x)
            elif kind == "pool":
                x = self._pool(layer, x)
            elif kind == "fc":
                x = affine(x, self.params[f"{name}.w"], self.params[f"{name}.b"])
            elif kind == "dropout":
                if mode == "training" and rng is None:
                    raise ValueError("training-mode dropout needs an rng")
                x = dropout(x, layer["rate"],
                            rng if rng is not None else np.random.default_rng(0), mode)
            elif kind == "scale":
                x = scale_scalar(x, self.params[f"{name}.s"])
            elif kind == "softmin":
                params = modules.SoftminParams(self.params[f"{name}.raw"],
                                               shared=bool(layer.get("shared")))
                x = modules.square_softmin(x, params)
            elif kind == "excitation":
                x = modules.square_excitation(
                    x, modules.ExcitationParams(self.params[f"{name}.alpha"]))
            elif kind == "block":
                x = self._run_block(layer, name, x, mode, rng)
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        return x

    def _run_block(self, layer, name, x, mode, rng) -> Tensor:
        h = self._run_layers(layer["main"], f"{name}.main.", x, mode, rng)
        if layer.get("excite"):
            alpha_name = "excite.alpha" if layer["excite"] == "shared" else f"{name}.alpha"
            h = modules.square_excitation(
                h, modules.ExcitationParams(self.params[alpha_name]))
        if layer.get("shortcut"):
            sc = self._run_layers(layer["shortcut"], f"{name}.sc.", x, mode, rng)
        else:
            sc = x
        return relu(add(h, sc))

    def _pool(self, layer, x) -> Tensor:
        op = layer["op"]
        if op == "gap":
            return gap(x)
        if op == "square":
            return modules.square_pool(x)
        if op == "gem":
            return modules.gem_pool(x, layer["p"])
        if op == "moment":
            return modules.moment_pool(x, layer["order"])
        raise ValueError(f"unknown pool op {op!r}")

    # -- bookkeeping ---------------------------------------------------------

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    def save(self, path) -> None:
        """Store the spec plus all parameter and running-stat arrays."""
        arrays = {f"param::{k}": v.data for k, v in self.params.items()}
        for k, st in self.states.items():
            arrays[f"state_mean::{k}"] = st.running_mean
            arrays[f"state_var::{k}"] = st.running_var
        np.savez(path, spec=self.spec.to_json(), **arrays)

    @classmethod
    def load(cls, path) -> "Model":
        with np.load(path) as npz:
            spec = ModelSpec.from_json(str(npz["spec"]))
            model = cls(spec, seed=0)
            for key in npz.files:
                if key.startswith("param::"):
                    model.params[key[7:]].data[...] = npz[key]
                elif key.startswith("state_mean::"):
                    model.states[key[12:]].running_mean = npz[key].copy()
                elif key.startswith("state_var::"):
                    model.states[key[11:]].running_var = npz[key].copy()
        return model


def spec_param_count(spec: ModelSpec) -> int:
    """Parameter count straight from the descriptors (no allocation)."""
    return param_count(spec)
