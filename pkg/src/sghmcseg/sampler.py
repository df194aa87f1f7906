"""SGHMC over the tempered posterior with a cyclical, annealed learning rate.

The momentum is the temperature-rescaled one, so one step reads

    r <- (1 - mu) r - eta g + sqrt(2 eta mu T) xi,    w <- w + r

with ``g`` the per-batch mean loss gradient plus the prior gradient.  At
``T = 0`` this is SGD with momentum ``1 - mu`` and learning rate ``eta``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .energy import EnergyConfig, minibatch_gradient
from .models import Model, WeightVector

log = logging.getLogger(__name__)

SCHEDULES = ("cyclical", "poly", "constant")


class ChainDivergedError(RuntimeError):
    def __init__(self, epoch: int, reason: str):
        super().__init__(f"chain diverged at epoch {epoch}: {reason}")
        self.epoch = epoch
        self.reason = reason


@dataclass(frozen=True)
class SamplerConfig:
    epochs: int = 1000
    cycles: int = 3
    burn_in: float = 0.6
    lr0: float = 0.02
    lr_restart: float = 0.2
    restart_epochs: int = 10
    friction: float = 0.01
    temperature: float = 1e-5
    thin_stride: int = 4
    iters_per_epoch: int | None = None
    schedule: str = "cyclical"
    noise_after_burn_in: bool = True

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.epochs < 1 or self.cycles < 1 or self.epochs < self.cycles:
            raise ValueError("need epochs >= cycles >= 1")
        if not 0.0 < self.burn_in < 1.0:
            raise ValueError("burn_in fraction must lie in (0, 1)")
        if not 0.0 < self.friction < 1.0:
            raise ValueError("friction must lie in (0, 1)")
        if self.thin_stride < 1:
            raise ValueError("thin_stride must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.schedule == "cyclical":
            if self.lr_restart < self.lr0:
                raise ValueError("restart learning rate must be >= lr0")
            if not self.restart_epochs < self.burn_in * self.cycle_length:
                raise ValueError("restart_epochs must be shorter than the burn-in part of a cycle")

    @property
    def cycle_length(self) -> int:
        return self.epochs // self.cycles

    @property
    def momentum(self) -> float:
        return 1.0 - self.friction

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(t_e: int, cfg: SamplerConfig) -> float:
    """Learning rate of epoch ``t_e`` (0-based).

    Cyclical: ``lr_restart`` for the first ``restart_epochs`` of each cycle,
    then ``lr0 * (1 - min(t_c, burn_in * T_c) / T_c) ** 0.9``, which is flat
    once the burn-in part of the cycle is over.
    """
    if not 0 <= t_e < cfg.epochs:
        raise ValueError(f"epoch {t_e} outside [0, {cfg.epochs})")
    if cfg.schedule == "constant":
        return cfg.lr0
    if cfg.schedule == "poly":
        return cfg.lr0 * (1.0 - t_e / cfg.epochs) ** 0.9
    tc_len = cfg.cycle_length
    t_c = t_e % tc_len
    if t_c < cfg.restart_epochs:
        return cfg.lr_restart
    return cfg.lr0 * (1.0 - min(t_c, cfg.burn_in * tc_len) / tc_len) ** 0.9


def cycle_of(t_e: int, cfg: SamplerConfig) -> int:
    return min(t_e // cfg.cycle_length, cfg.cycles - 1)


def in_sampling_phase(t_e: int, cfg: SamplerConfig) -> bool:
    if cfg.schedule != "cyclical":
        return True
    return (t_e % cfg.cycle_length) >= cfg.burn_in * cfg.cycle_length


def is_checkpoint_epoch(t_e: int, cfg: SamplerConfig) -> bool:
    """Thinned, post-burn-in membership test: t mod T_c >= gamma T_c and t mod stride == 0."""
    return (t_e % cfg.cycle_length) >= cfg.burn_in * cfg.cycle_length and t_e % cfg.thin_stride == 0


def checkpoint_epochs(cfg: SamplerConfig) -> list[int]:
    return [t for t in range(cfg.epochs) if is_checkpoint_epoch(t, cfg)]


@dataclass
class ChainState:
    w: np.ndarray
    r: np.ndarray
    epoch: int = 0
    cycle: int = 0
    rng_state: dict | None = None

    def __post_init__(self):
        if self.r.shape != self.w.shape:
            raise ValueError("momentum and weights must have the same length")

    def copy(self) -> "ChainState":
        return ChainState(self.w.copy(), self.r.copy(), self.epoch, self.cycle, self.rng_state)


def sghmc_update(w: np.ndarray, r: np.ndarray, g: np.ndarray, eta: float, mu: float,
                 temperature: float, rng: np.random.Generator | None) -> None:
    """In-place SGHMC step on flat arrays."""
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient")
    dt = r.dtype.type
    r *= dt(1.0 - mu)
    r -= dt(eta) * g
    if temperature > 0:
        if rng is None:
            raise ValueError("a positive temperature needs an rng for the injected noise")
        r += dt(math.sqrt(2.0 * eta * mu * temperature)) * rng.standard_normal(r.shape, dtype=r.dtype)
    w += r


def sghmc_step(state: ChainState, gradient: np.ndarray, eta: float, mu: float, temperature: float,
               rng: np.random.Generator | None = None) -> ChainState:
    """One SGHMC step; returns a new state and leaves ``state`` untouched."""
    new = state.copy()
    sghmc_update(new.w, new.r, np.asarray(gradient, dtype=new.w.dtype), eta, mu, temperature, rng)
    return new


@dataclass
class Checkpoint:
    epoch: int
    cycle: int
    lr: float
    weights: WeightVector


@dataclass
class CheckpointStore:
    checkpoints: list[Checkpoint] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.checkpoints)

    def __iter__(self):
        return iter(self.checkpoints)

    @property
    def epochs(self) -> list[int]:
        return [c.epoch for c in self.checkpoints]

    @property
    def cycles(self) -> list[int]:
        return [c.cycle for c in self.checkpoints]

    def weights(self) -> list[WeightVector]:
        return [c.weights for c in self.checkpoints]

    def by_cycle(self, cycle: int) -> "CheckpointStore":
        return CheckpointStore([c for c in self.checkpoints if c.cycle == cycle], dict(self.meta))

    def last_cycle(self) -> "CheckpointStore":
        if not self.checkpoints:
            return CheckpointStore([], dict(self.meta))
        return self.by_cycle(max(self.cycles))


Batch = tuple[np.ndarray, np.ndarray]
AugmentFn = Callable[[np.ndarray, np.ndarray, np.random.Generator], Batch]


def run_chain(model: Model, dataset: Batch, sampler: SamplerConfig, energy: EnergyConfig,
              init: WeightVector, seed: int = 0, augment: AugmentFn | None = None,
              dropout: bool = False, collect: str = "thinned",
              progress: Callable[[int, float, float], None] | None = None) -> CheckpointStore:
    """Simulate the chain for ``sampler.epochs`` epochs and collect checkpoints.

    ``dataset`` is ``(images, labels)``.  Batches are drawn by shuffling
    without replacement each epoch; ``augment`` (if given) transforms each
    batch.  ``collect`` is ``"thinned"`` (post-burn-in, every
    ``thin_stride`` epochs) or ``"final"`` (last weights only).  Independent
    streams drive data order, augmentation, dropout masks and injected noise,
    so changing the temperature never changes the batch sequence.
    """
    x_all, y_all = dataset
    n = len(x_all)
    if n == 0:
        raise ValueError("empty dataset")
    if collect not in ("thinned", "final"):
        raise ValueError("collect must be 'thinned' or 'final'")
    nb = energy.batch_size
    iters = sampler.iters_per_epoch or math.ceil(n / nb)
    ss = np.random.SeedSequence(seed)
    data_rng, aug_rng, drop_rng, noise_rng = (np.random.default_rng(s) for s in ss.spawn(4))

    w = init.values.copy()
    r = np.zeros_like(w)
    lam = energy.lam
    mu = sampler.friction
    offset = float(model.config.n_classes) if model.config.arch == "mini-unet" else 0.0

    store = CheckpointStore(meta={
        "sampler": sampler.to_dict(),
        "energy": asdict(energy),
        "seed": seed,
        "iters_per_epoch": iters,
        "schedule": [],
        "loss": [],
    })
    initial_loss = None
    bad_epochs = 0
    order = np.empty(0, dtype=np.int64)
    pos = 0
    for t_e in range(sampler.epochs):
        eta = lr_schedule(t_e, sampler)
        temp = sampler.temperature
        if sampler.noise_after_burn_in and not in_sampling_phase(t_e, sampler):
            temp = 0.0
        losses = []
        for _ in range(iters):
            if pos + nb > len(order):
                order = np.concatenate([order[pos:], data_rng.permutation(n)])
                pos = 0
            idx = order[pos:pos + nb]
            pos += nb
            xb, yb = x_all[idx], y_all[idx]
            if augment is not None:
                xb, yb = augment(xb, yb, aug_rng)
            g, loss = minibatch_gradient(model, w, (xb, yb), lam, rng=drop_rng, dropout=dropout,
                                         return_loss=True)
            if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                raise ChainDivergedError(t_e, "non-finite loss or gradient")
            sghmc_update(w, r, g, eta, mu, temp, noise_rng)
            losses.append(loss)
        ep_loss = float(np.mean(losses))
        store.meta["schedule"].append(eta)
        store.meta["loss"].append(ep_loss)
        if progress is not None:
            progress(t_e, eta, ep_loss)
        shifted = ep_loss + offset
        if initial_loss is None:
            initial_loss = shifted
        elif shifted > 10.0 * initial_loss:
            bad_epochs += 1
            if bad_epochs >= 3:
                raise ChainDivergedError(t_e, f"loss {ep_loss:.4g} above 10x its initial value for 3 epochs")
        else:
            bad_epochs = 0
        if collect == "thinned" and sampler.schedule == "cyclical" and is_checkpoint_epoch(t_e, sampler):
            store.checkpoints.append(Checkpoint(t_e, cycle_of(t_e, sampler), eta,
                                                WeightVector(w.copy(), init.layout)))
    if collect == "final" or sampler.schedule != "cyclical":
        t_last = sampler.epochs - 1
        store.checkpoints.append(Checkpoint(t_last, cycle_of(t_last, sampler), lr_schedule(t_last, sampler),
                                            WeightVector(w.copy(), init.layout)))
    store.meta["final_momentum_norm"] = float(np.linalg.norm(r))
    return store


def _spread(total: int, k: int) -> list[int]:
    base, extra = divmod(total, k)
    return [base + (1 if i >= k - extra else 0) for i in range(k)]


def select_samples(store: CheckpointStore, m: int, mode: str = "even") -> list[WeightVector]:
    """Pick ``m`` checkpoints: the final ``m`` (``last``) or evenly spread, cycle-balanced (``even``)."""
    if len(store) == 0:
        raise ValueError("empty checkpoint store")
    if mode not in ("last", "even"):
        raise ValueError("mode must be 'last' or 'even'")
    if m < 1:
        raise ValueError("need m >= 1")
    if m >= len(store):
        if m > len(store):
            warnings.warn(f"requested {m} samples but the store holds {len(store)}; returning all")
        return store.weights()
    if mode == "last":
        return store.weights()[-m:]

    cycles = sorted(set(store.cycles))
    groups = [[c for c in store.checkpoints if c.cycle == cy] for cy in cycles]
    quota = _spread(m, len(groups))
    # move quota away from cycles that are too short
    for _ in range(len(groups)):
        surplus = sum(max(q - len(g), 0) for q, g in zip(quota, groups))
        if not surplus:
            break
        quota = [min(q, len(g)) for q, g in zip(quota, groups)]
        for i in reversed(range(len(groups))):
            room = len(groups[i]) - quota[i]
            take = min(room, surplus)
            quota[i] += take
            surplus -= take
    picked = []
    for g, q in zip(groups, quota):
        if q == 0:
            continue
        idx = [int(round((j + 1) * len(g) / q)) - 1 for j in range(q)]
        picked.extend(g[i].weights for i in idx)
    return picked
