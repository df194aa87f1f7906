"""Desk-scale U-Net and MLP, plus the flat weight-vector layout."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Graph, Tensor

ARCHS = ("mini-unet", "mlp")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description; the parameter count is a pure function of it.

    ``dropout_sites`` are depth indices (0 = full resolution).  A site ``l``
    drops the output of encoder stage ``l`` and of decoder stage ``l`` (the
    bottleneck, ``levels - 1``, has no decoder twin).  ``None`` selects the
    innermost encoder/decoder stages, ``{levels - 2, levels - 1}``.
    """

    arch: str = "mini-unet"
    levels: int = 3
    base_channels: int = 8
    classes: int = 4
    in_channels: int = 1
    dropout_sites: tuple[int, ...] | None = None
    dropout_p: float = 0.0
    mlp_layers: tuple[int, ...] = (2, 8, 2)
    negative_slope: float = 0.01
    norm_affine: bool = True

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.arch == "mini-unet":
            if self.levels < 2:
                raise ValueError("levels must be >= 2")
            if self.base_channels < 2:
                raise ValueError("base_channels must be >= 2")
            if self.classes < 2:
                raise ValueError("classes must be >= 2")
            for s in self.sites:
                if not 0 <= s < self.levels:
                    raise ValueError(f"dropout site {s} outside 0..{self.levels - 1}")
        else:
            if len(self.mlp_layers) < 2 or min(self.mlp_layers) < 1:
                raise ValueError("mlp_layers needs at least input and output widths")
            if self.mlp_layers[-1] < 2:
                raise ValueError("mlp output width (classes) must be >= 2")

    @property
    def sites(self) -> tuple[int, ...]:
        if self.dropout_sites is None:
            return (self.levels - 2, self.levels - 1)
        return tuple(sorted(set(self.dropout_sites)))

    @property
    def n_classes(self) -> int:
        return self.classes if self.arch == "mini-unet" else self.mlp_layers[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dropout_sites"] = list(self.sites) if self.dropout_sites is not None else None
        d["mlp_layers"] = list(self.mlp_layers)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class ParamSpec:
    name: str
    offset: int
    shape: tuple[int, ...]
    fan_in: int = 0

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class Layout:
    """Canonical ordered parameter table: encoder to decoder, kernel before bias."""

    specs: tuple[ParamSpec, ...]

    @property
    def size(self) -> int:
        return sum(s.size for s in self.specs)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        """Views into ``flat`` keyed by parameter name (no copy)."""
        flat = np.asarray(flat)
        if flat.ndim != 1 or flat.size != self.size:
            raise ValueError(f"flat vector has {flat.size} values, layout expects {self.size}")
        return {s.name: flat[s.offset:s.offset + s.size].reshape(s.shape) for s in self.specs}

    def flatten(self, params: Mapping[str, np.ndarray], dtype=None) -> np.ndarray:
        if set(params) != set(self.names):
            raise ValueError("parameter names do not match the layout")
        parts = []
        for s in self.specs:
            arr = np.asarray(params[s.name])
            if arr.shape != s.shape:
                raise ValueError(f"{s.name}: shape {arr.shape} != layout shape {s.shape}")
            parts.append(arr.ravel())
        out = np.concatenate(parts)
        return out.astype(dtype) if dtype is not None else out


@dataclass
class WeightVector:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 1 or self.values.size != self.layout.size:
            raise ValueError(f"weight vector length {self.values.size} != layout size {self.layout.size}")

    def copy(self) -> "WeightVector":
        return WeightVector(self.values.copy(), self.layout)

    def params(self) -> dict[str, np.ndarray]:
        return self.layout.unflatten(self.values)


def flatten(params: Mapping[str, np.ndarray], layout: Layout) -> np.ndarray:
    return layout.flatten(params)


def unflatten(flat: np.ndarray, layout: Layout) -> dict[str, np.ndarray]:
    return layout.unflatten(flat)


class _LayoutBuilder:
    def __init__(self):
        self.specs: list[ParamSpec] = []
        self.offset = 0

    def add(self, name: str, shape: Sequence[int], fan_in: int = 0):
        shape = tuple(int(s) for s in shape)
        self.specs.append(ParamSpec(name, self.offset, shape, fan_in))
        self.offset += int(np.prod(shape))

    def build(self) -> Layout:
        return Layout(tuple(self.specs))


class Model:
    """A built network: immutable layout plus a forward function.

    ``forward`` takes a dict of parameter Tensors, an input Tensor and an
    optional dropout rng; it returns per-voxel class probabilities (softmax
    over axis 1).
    """

    def __init__(self, config: ModelConfig, layout: Layout):
        self.config = config
        self.layout = layout
        self.graph = Graph(self._graph_fn, ("x",) + tuple(layout.names))

    @property
    def n_params(self) -> int:
        return self.layout.size

    def _graph_fn(self, inputs, rng=None, dropout=False):
        params = {k: inputs[k] for k in self.layout.names}
        return {"probs": self.forward(params, inputs["x"], rng=rng, dropout=dropout)}

    def logits(self, params: Mapping[str, Tensor], x: Tensor, rng=None, dropout: bool = False) -> Tensor:
        raise NotImplementedError

    def forward(self, params: Mapping[str, Tensor], x: Tensor, rng=None, dropout: bool = False) -> Tensor:
        return T.softmax(self.logits(params, x, rng=rng, dropout=dropout), axis=1)

    def check_input(self, x: np.ndarray) -> None:
        raise NotImplementedError


class MiniUNet(Model):
    """U-Net: ``levels`` stages of (3x3 conv, instance norm, leaky ReLU) x 2.

    Convolutions feeding an instance norm carry no bias (the norm removes it
    exactly).  Norm scales are stored as offsets from 1, so a zero weight
    vector is the identity affine map and the Gaussian prior pulls the scale
    towards 1.  With ``norm_affine=False`` the norms have no parameters and
    every conv kernel is scale invariant.
    """

    @staticmethod
    def make_layout(cfg: ModelConfig) -> Layout:
        lb = _LayoutBuilder()
        ch = [cfg.base_channels * 2 ** l for l in range(cfg.levels)]
        cin = cfg.in_channels
        for l in range(cfg.levels):
            for k in (1, 2):
                lb.add(f"enc{l}.conv{k}.weight", (ch[l], cin, 3, 3), fan_in=cin * 9)
                if cfg.norm_affine:
                    lb.add(f"enc{l}.norm{k}.scale", (ch[l],))
                    lb.add(f"enc{l}.norm{k}.shift", (ch[l],))
                cin = ch[l]
        for l in range(cfg.levels - 2, -1, -1):
            cin = ch[l + 1] + ch[l]
            for k in (1, 2):
                lb.add(f"dec{l}.conv{k}.weight", (ch[l], cin, 3, 3), fan_in=cin * 9)
                if cfg.norm_affine:
                    lb.add(f"dec{l}.norm{k}.scale", (ch[l],))
                    lb.add(f"dec{l}.norm{k}.shift", (ch[l],))
                cin = ch[l]
        lb.add("head.weight", (cfg.classes, ch[0], 1, 1), fan_in=ch[0])
        lb.add("head.bias", (cfg.classes,))
        return lb.build()

    def _block(self, params, prefix, x):
        slope = self.config.negative_slope
        for k in (1, 2):
            x = T.conv2d(x, params[f"{prefix}.conv{k}.weight"], padding=1)
            if self.config.norm_affine:
                x = T.instance_norm(x, 1.0 + params[f"{prefix}.norm{k}.scale"], params[f"{prefix}.norm{k}.shift"])
            else:
                x = T.instance_norm(x)
            x = T.leaky_relu(x, slope)
        return x

    def _maybe_drop(self, x, level, rng, dropout):
        cfg = self.config
        if dropout and cfg.dropout_p > 0 and level in cfg.sites:
            return T.dropout(x, cfg.dropout_p, rng)
        return x

    def logits(self, params, x, rng=None, dropout=False):
        cfg = self.config
        skips = []
        h = x
        for l in range(cfg.levels):
            h = self._block(params, f"enc{l}", h)
            h = self._maybe_drop(h, l, rng, dropout)
            if l < cfg.levels - 1:
                skips.append(h)
                h = T.max_pool2x2(h)
        for l in range(cfg.levels - 2, -1, -1):
            h = T.concat([T.upsample2x(h), skips[l]], axis=1)
            h = self._block(params, f"dec{l}", h)
            h = self._maybe_drop(h, l, rng, dropout)
        return T.conv2d(h, params["head.weight"], params["head.bias"])

    def check_input(self, x: np.ndarray) -> None:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected input (N, {cfg.in_channels}, H, W), got {x.shape}")
        f = 2 ** (cfg.levels - 1)
        if x.shape[2] % f or x.shape[3] % f:
            raise ValueError(f"spatial extents {x.shape[2:]} must be divisible by {f}")


class MLP(Model):
    """Fully connected network with leaky-ReLU hidden layers; input (N, features)."""

    @staticmethod
    def make_layout(cfg: ModelConfig) -> Layout:
        lb = _LayoutBuilder()
        widths = cfg.mlp_layers
        for i in range(len(widths) - 1):
            lb.add(f"fc{i}.weight", (widths[i], widths[i + 1]), fan_in=widths[i])
            lb.add(f"fc{i}.bias", (widths[i + 1],))
        return lb.build()

    def logits(self, params, x, rng=None, dropout=False):
        cfg = self.config
        n_layers = len(cfg.mlp_layers) - 1
        h = x
        for i in range(n_layers):
            h = T.matmul(h, params[f"fc{i}.weight"]) + params[f"fc{i}.bias"]
            if i < n_layers - 1:
                h = T.leaky_relu(h, cfg.negative_slope)
                if dropout and cfg.dropout_p > 0 and i in cfg.sites:
                    h = T.dropout(h, cfg.dropout_p, rng)
        return h

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim != 2 or x.shape[1] != self.config.mlp_layers[0]:
            raise ValueError(f"expected input (N, {self.config.mlp_layers[0]}), got {x.shape}")


def _init_values(layout: Layout, seed: int, negative_slope: float, dtype) -> np.ndarray:
    rng = np.random.default_rng(seed)
    values = np.zeros(layout.size, dtype=np.float64)
    gain = np.sqrt(2.0 / (1.0 + negative_slope ** 2))
    for s in layout.specs:
        if s.fan_in:
            bound = gain * np.sqrt(3.0 / s.fan_in)
            values[s.offset:s.offset + s.size] = rng.uniform(-bound, bound, s.size)
    return values.astype(dtype)


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> tuple[Model, WeightVector]:
    """Build the network and draw fan-in-scaled uniform initial weights."""
    if config.arch == "mini-unet":
        model: Model = MiniUNet(config, MiniUNet.make_layout(config))
    else:
        model = MLP(config, MLP.make_layout(config))
    values = _init_values(model.layout, seed, config.negative_slope, dtype)
    return model, WeightVector(values, model.layout)


def param_tensors(weights: WeightVector, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in weights.params().items()}


def predict(model: Model, weights: WeightVector | np.ndarray, image: np.ndarray,
            dropout_mode: str = "off", rng: np.random.Generator | None = None,
            batch_size: int = 64) -> np.ndarray:
    """Class probabilities for a batch (N, C_in, H, W) or a single image (C_in, H, W)/(H, W)."""
    if dropout_mode not in ("off", "sample"):
        raise ValueError("dropout_mode must be 'off' or 'sample'")
    if isinstance(weights, WeightVector):
        if weights.layout != model.layout:
            raise ValueError("weight layout does not match the model")
        values = weights.values
    else:
        values = np.asarray(weights)
    x = np.asarray(image)
    single = False
    if model.config.arch == "mini-unet":
        if x.ndim == 2:
            x = x[None, None]
            single = True
        elif x.ndim == 3:
            x = x[None]
            single = True
    elif x.ndim == 1:
        x = x[None]
        single = True
    model.check_input(x)
    x = x.astype(values.dtype, copy=False)
    params = {k: Tensor(v) for k, v in model.layout.unflatten(values).items()}
    sample = dropout_mode == "sample"
    if sample and rng is None:
        raise ValueError("dropout_mode='sample' needs an rng")
    outs = [model.forward(params, Tensor(x[i:i + batch_size]), rng=rng, dropout=sample).data
            for i in range(0, x.shape[0], batch_size)]
    probs = np.concatenate(outs, axis=0)
    return probs[0] if single else probs
