"""Named experiment recipes (vanilla, MC-dropout, deep ensembles, SGD-const, SGHMC) and sweeps."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig, derive_seed
from .diversity import DiversityReport, diversity_confusion
from .inference import argmax_segmentation, ensemble_predict, mc_dropout_predict
from .metrics import calibration_report, per_class_dice
from .models import Model, ModelConfig, WeightVector, build_model
from .sampler import ChainDivergedError, CheckpointStore, SamplerConfig, run_chain, select_samples
from .synth import Dataset, batch_augmenter

log = logging.getLogger(__name__)

PROTOCOLS = ("vanilla", "mc-dropout", "deep-ensembles", "sgd-const", "sghmc-single", "sghmc-multi")


@dataclass(frozen=True)
class ProtocolSpec:
    name: str
    members: int = 1
    samples: int = 16
    selection: str = "even"
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    energy_lam: float = 3e-5
    batch_size: int = 8
    augment: bool = True
    collect: str = "thinned"
    dropout_train: bool = False

    def __post_init__(self):
        if self.name not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.name!r}; expected one of {PROTOCOLS}")
        if self.members < 1 or self.samples < 1:
            raise ValueError("members and samples must be >= 1")
        if self.name == "deep-ensembles" and self.sampler.temperature != 0:
            raise ValueError("deep-ensembles members are T = 0 chains")
        if self.name == "sgd-const" and (self.sampler.temperature != 0 or self.sampler.cycles != 1):
            raise ValueError("sgd-const is a single-cycle T = 0 chain")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def make_protocol(name: str, cfg: RunConfig | None = None, **overrides) -> ProtocolSpec:
    """The recipe ``name`` built from a run configuration.

    vanilla / mc-dropout / deep-ensembles train with the poly schedule at T = 0
    and keep final weights; sgd-const is one cycle of the cyclical schedule at
    T = 0; sghmc-single and sghmc-multi share one cyclical chain at the
    configured T and differ only in which cycles are sampled.
    """
    cfg = cfg or RunConfig()
    s = cfg.sampler
    model = cfg.model
    members, collect, dropout = 1, "thinned", False
    if name in ("vanilla", "mc-dropout", "deep-ensembles"):
        s = replace(s, schedule="poly", temperature=0.0)
        collect = "final"
        if name == "mc-dropout":
            model = replace(model, dropout_p=cfg.protocol.mc_dropout_p)
            dropout = True
        if name == "deep-ensembles":
            members = cfg.protocol.members
    elif name == "sgd-const":
        s = replace(s, cycles=1, temperature=0.0, restart_epochs=min(s.restart_epochs, s.epochs // 2))
    elif name not in ("sghmc-single", "sghmc-multi"):
        raise ValueError(f"unknown protocol {name!r}; expected one of {PROTOCOLS}")
    kw = dict(name=name, members=members, samples=cfg.protocol.samples, selection=cfg.protocol.selection,
              model=model, sampler=s, energy_lam=cfg.energy.lam, batch_size=cfg.energy.batch_size,
              augment=cfg.augment.enabled, collect=collect, dropout_train=dropout)
    kw.update(overrides)
    return ProtocolSpec(**kw)


@dataclass
class ProtocolResult:
    spec: ProtocolSpec
    model: Model
    stores: list[CheckpointStore]
    samples: list[WeightVector]
    provenance: dict

    def predict(self, images: np.ndarray, rng: np.random.Generator | None = None,
                m: int | None = None, return_members: bool = False):
        """Predictive mean over the protocol's samples (or dropout masks for mc-dropout)."""
        if self.spec.name == "mc-dropout":
            rng = rng if rng is not None else np.random.default_rng(self.provenance["seeds"]["inference"])
            return mc_dropout_predict(self.samples[0], self.model, images, m or self.spec.samples, rng,
                                      return_members=return_members)
        samples = self.samples if m is None else self.samples[:m]
        return ensemble_predict(samples, self.model, images, return_members=return_members)


def chain_key(spec: ProtocolSpec, seed: int, member: int) -> str:
    blob = json.dumps({"model": asdict(spec.model), "sampler": asdict(spec.sampler), "lam": spec.energy_lam,
                       "batch": spec.batch_size, "augment": spec.augment, "collect": spec.collect,
                       "dropout": spec.dropout_train, "seed": seed, "member": member}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def run_protocol(spec: ProtocolSpec, dataset: Dataset, seed: int, cfg: RunConfig | None = None,
                 cache: dict | None = None, progress=None) -> ProtocolResult:
    """Run every chain of the recipe and pick the inference samples.

    Seeds come from ``derive_seed(seed, stream, member)``; a ``cache`` dict
    lets recipes that share a chain (sghmc-single / sghmc-multi) run it once.
    Member divergences are collected and re-raised together.
    """
    from .energy import EnergyConfig

    cfg = cfg or RunConfig()
    x, y = dataset["train"]
    energy = EnergyConfig(lam=spec.energy_lam, temperature=spec.sampler.temperature,
                          dataset_size=len(x), batch_size=min(spec.batch_size, len(x)))
    aug = batch_augmenter(cfg.augment) if spec.augment else None
    stores = []
    seeds = {"global": seed, "members": []}
    failures = {}
    model = None
    # sghmc-single/multi and sgd-const use the same chain stream, so they match at equal settings
    for k in range(spec.members):
        init_seed = derive_seed(seed, "init", k)
        chain_seed = derive_seed(seed, "chain", k)
        seeds["members"].append({"init": init_seed, "chain": chain_seed})
        model, w0 = build_model(spec.model, seed=init_seed)
        key = chain_key(spec, seed, k)
        if cache is not None and key in cache:
            stores.append(cache[key])
            continue
        try:
            store = run_chain(model, (x, y), spec.sampler, energy, w0, seed=chain_seed, augment=aug,
                              dropout=spec.dropout_train, collect=spec.collect, progress=progress)
        except ChainDivergedError as exc:
            failures[k] = str(exc)
            continue
        if cache is not None:
            cache[key] = store
        stores.append(store)
    if failures:
        raise ChainDivergedError(-1, "; ".join(f"member {k}: {v}" for k, v in failures.items()))
    seeds["inference"] = derive_seed(seed, "inference", 0)

    if spec.name in ("vanilla", "mc-dropout"):
        samples = [stores[0].checkpoints[-1].weights]
    elif spec.name == "deep-ensembles":
        samples = [s.checkpoints[-1].weights for s in stores]
    elif spec.name == "sghmc-single":
        last = stores[0].last_cycle()
        samples = select_samples(last, min(spec.samples, len(last)), spec.selection)
    else:
        samples = select_samples(stores[0], spec.samples, spec.selection)
    provenance = {
        "protocol": spec.name,
        "spec": spec.to_dict(),
        "spec_hash": spec.config_hash(),
        "chain_keys": [chain_key(spec, seed, k) for k in range(spec.members)],
        "model_hash": spec.model.config_hash(),
        "run_config_hash": cfg.config_hash(),
        "seeds": seeds,
        "dataset_seed": dataset.seed,
        "schedule": [s.meta.get("schedule", []) for s in stores],
    }
    return ProtocolResult(spec, model, stores, samples, provenance)


@dataclass
class Evaluation:
    nll: float
    ece: float
    brier: float
    dice: np.ndarray            # (N, classes) per image
    probs: np.ndarray

    @property
    def mean_dice(self) -> float:
        return float(self.dice.mean())

    def summary(self) -> dict:
        return {"nll": self.nll, "ece": self.ece, "brier": self.brier, "mean_dice": self.mean_dice,
                "dice_per_class": self.dice.mean(axis=0).tolist()}


def evaluate_probs(probs: np.ndarray, labels: np.ndarray, n_bins: int = 10) -> Evaluation:
    classes = list(range(1, probs.shape[1]))
    rep = calibration_report(probs, labels, n_bins)
    d = per_class_dice(argmax_segmentation(probs), labels, classes)
    return Evaluation(rep.nll, rep.ece, rep.brier, d, probs)


def functional_diversity(result: ProtocolResult, images: np.ndarray, labels: np.ndarray,
                         rng: np.random.Generator | None = None, n_sigma: int = 5) -> DiversityReport:
    """Diversity confusion matrix of the protocol's members on one split."""
    mean, members = result.predict(images, rng=rng, return_members=True)
    preds = [argmax_segmentation(p) for p in members]
    classes = list(range(1, mean.shape[1]))
    weights = result.samples if result.spec.name != "mc-dropout" and len(result.samples) > 1 else None
    return diversity_confusion(preds, argmax_segmentation(mean), labels, classes, weights, n_sigma)


SWEEP_COLUMNS = ("temperature", "augment", "lam", "nll", "ece", "brier", "mean_dice", "diversity", "volume")


def sweep(dataset: Dataset, seed: int, cfg: RunConfig | None = None,
          temperatures: Sequence[float] = (0.0, 1e-6, 1e-5, 1e-4), augment: Sequence[bool] = (True,),
          lams: Sequence[float] | None = None, split: str = "val", cache: dict | None = None) -> list[dict]:
    """One sghmc-multi run per (T, augmentation, lambda) cell; one table row per cell."""
    cfg = cfg or RunConfig()
    if len(temperatures) < 1:
        raise ValueError("need at least one temperature")
    lams = list(lams) if lams else [cfg.energy.lam]
    x, y = dataset[split]
    rows = []
    for lam in lams:
        for aug in augment:
            for t in temperatures:
                spec = make_protocol("sghmc-multi", cfg, sampler=replace(cfg.sampler, temperature=t),
                                     augment=aug, energy_lam=lam)
                res = run_protocol(spec, dataset, seed, cfg, cache=cache)
                probs, members = res.predict(x, return_members=True)
                ev = evaluate_probs(probs, y, cfg.eval.n_bins)
                preds = [argmax_segmentation(p) for p in members]
                div = diversity_confusion(preds, argmax_segmentation(probs), y,
                                          list(range(1, probs.shape[1])), res.samples, cfg.eval.n_sigma)
                rows.append({"temperature": t, "augment": aug, "lam": lam, "nll": ev.nll, "ece": ev.ece,
                             "brier": ev.brier, "mean_dice": ev.mean_dice, "diversity": div.mean_distance,
                             "volume": div.volume})
    return rows


def temperature_sweep(temperatures: Sequence[float], augmentation: Sequence[bool], dataset: Dataset,
                      seed: int, cfg: RunConfig | None = None, split: str = "val",
                      cache: dict | None = None) -> list[dict]:
    if len(temperatures) < 2:
        raise ValueError("a temperature sweep needs at least two temperatures")
    return sweep(dataset, seed, cfg, temperatures, augmentation, None, split, cache)


def prior_sweep(lams: Sequence[float], dataset: Dataset, seed: int, cfg: RunConfig | None = None,
                split: str = "val", cache: dict | None = None) -> list[dict]:
    cfg = cfg or RunConfig()
    return sweep(dataset, seed, cfg, (cfg.sampler.temperature,), (cfg.augment.enabled,), lams, split, cache)


def write_csv(rows: list[dict], path: str | Path, columns: Sequence[str] | None = None) -> Path:
    p = Path(path)
    cols = list(columns or (rows[0].keys() if rows else []))
    with p.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k) for k in cols})
    return p
