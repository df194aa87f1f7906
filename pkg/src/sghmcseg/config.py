"""Run configuration tree, strict loading, flag overrides and seed derivation."""

from __future__ import annotations

import hashlib
import json
import types
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

from .energy import EnergyConfig
from .models import ModelConfig
from .sampler import SamplerConfig
from .synth import AugmentConfig, SceneConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration entry."""


def derive_seed(seed: int, stream: str, index: int = 0) -> int:
    """64-bit seed for one named RNG stream, a pure function of (seed, stream, index)."""
    h = hashlib.sha256(f"{int(seed)}/{stream}/{int(index)}".encode()).digest()
    return int.from_bytes(h[:8], "little")


@dataclass(frozen=True)
class DataConfig:
    train: int = 40
    val: int = 20
    test_in: int = 30
    test_shift: int = 60

    def counts(self) -> dict[str, int]:
        return asdict(self)


@dataclass(frozen=True)
class ProtocolConfig:
    name: str = "sghmc-multi"
    members: int = 5               # deep-ensembles only
    samples: int = 16              # M used at inference
    selection: str = "even"
    mc_dropout_p: float = 0.2


@dataclass(frozen=True)
class EvalConfig:
    n_bins: int = 10
    dice_thresh: float = 0.8
    assd_thresh: float = 2.0
    n_sigma: int = 5
    temperatures: tuple[float, ...] = (0.0, 1e-6, 1e-5, 1e-4)
    lams: tuple[float, ...] = (1e-3, 1e-2, 1e-1)


def desk_sampler(**kw) -> SamplerConfig:
    """Small cyclical schedule: 3 cycles of 40 epochs, 8 checkpoints per cycle."""
    base = dict(epochs=120, cycles=3, burn_in=0.6, lr0=0.02, lr_restart=0.2, restart_epochs=4,
                thin_stride=2, temperature=1e-5)
    base.update(kw)
    return SamplerConfig(**base)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    # desk runs need a stronger prior than full scale: with only a few hundred
    # steps per chain a weak decay lets the norm of the scale-invariant kernels
    # grow until the restarts no longer move them
    energy: EnergyConfig = field(default_factory=lambda: EnergyConfig(lam=1e-2, dataset_size=40, batch_size=8))
    sampler: SamplerConfig = field(default_factory=desk_sampler)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        # the output location does not change any result
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a table, got {type(value).__name__}")
        return _build(tp, value, path)
    if origin is tuple:
        args = typing.get_args(tp)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, path) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} entries")
        return tuple(_coerce(a, v, path) for a, v in zip(args, value))
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, path)
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is bool and not isinstance(value, bool):
        raise ConfigError(f"{path}: expected true/false")
    if tp is str and not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string")
    return value


def _build(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        where = f" in [{path}]" if path else ""
        raise ConfigError(f"unknown config key(s){where}: {', '.join(sorted(unknown))}")
    kwargs = {k: _coerce(hints[k], v, f"{path}.{k}" if path else k) for k, v in data.items()}
    default = cls()
    try:
        return replace(default, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{path or 'root'}] {exc}") from exc


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def config_from_dict(data: dict) -> RunConfig:
    """Build a RunConfig from a (partial) nested dict; unknown keys raise ConfigError."""
    # nested sections are merged onto their own defaults, not on RunConfig's
    cfg = _build(RunConfig, {k: v for k, v in data.items() if not isinstance(v, dict)})
    sections = {k: v for k, v in data.items() if isinstance(v, dict)}
    if sections:
        merged = _merge(json.loads(json.dumps(cfg.to_dict())), sections)
        cfg = _build(RunConfig, merged)
    return cfg


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Read a JSON config file (if given) and apply dotted-key overrides on top."""
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a table")
    for key, value in (overrides or {}).items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return config_from_dict(data)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


def sync_temperature(cfg: RunConfig, temperature: float) -> RunConfig:
    """Set T in both the sampler and the energy section."""
    return replace(cfg, sampler=replace(cfg.sampler, temperature=temperature),
                   energy=replace(cfg.energy, temperature=temperature))


__all__ = [
    "ConfigError", "DataConfig", "EvalConfig", "ProtocolConfig", "RunConfig", "config_from_dict",
    "derive_seed", "desk_sampler", "load_config", "save_config", "sync_temperature",
]
