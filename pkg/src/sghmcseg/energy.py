"""Segmentation losses, Gaussian prior and the tempered energy's mini-batch gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .models import Model, WeightVector
from .tensor import Tensor

DICE_SMOOTH = 1e-5
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class EnergyConfig:
    lam: float = 3e-5          # prior precision
    temperature: float = 1e-5
    dataset_size: int = 1
    batch_size: int = 1

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("prior precision must be > 0")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 1 <= self.batch_size <= self.dataset_size:
            raise ValueError("need 1 <= batch_size <= dataset_size")


def one_hot(labels: np.ndarray, n_classes: int, dtype=np.float32) -> np.ndarray:
    """(N, ...) integer labels -> (N, C, ...) indicator array."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in 0..{n_classes - 1}")
    eye = np.eye(n_classes, dtype=dtype)
    return np.moveaxis(eye[labels], -1, 1)


def _check(probs, labels):
    p = probs.shape
    if len(p) < 2 or p[:1] + p[2:] != np.shape(labels):
        raise ValueError(f"probability map {p} does not match label map {np.shape(labels)}")


def _as_prob_tensor(probs) -> Tensor:
    return probs if isinstance(probs, Tensor) else Tensor(np.asarray(probs))


def soft_dice_per_sample(probs, labels, smooth: float = DICE_SMOOTH) -> Tensor:
    """Soft-Dice loss of each sample, shape (N,); values in [-C, 0]."""
    probs = _as_prob_tensor(probs)
    _check(probs, labels)
    c = probs.shape[1]
    y = one_hot(labels, c, dtype=probs.dtype)
    axes = tuple(range(2, probs.ndim))
    inter = (probs * y).sum(axis=axes)                     # N, C
    denom = probs.sum(axis=axes) + y.sum(axis=axes)        # N, C
    ratio = (inter + smooth) / (denom + 2.0 * smooth)
    return -2.0 * ratio.sum(axis=1)


def soft_dice_loss(probs, labels, smooth: float = DICE_SMOOTH) -> Tensor:
    """Batch mean of the per-sample soft-Dice loss."""
    return soft_dice_per_sample(probs, labels, smooth).mean()


def cross_entropy_per_sample(probs, labels) -> Tensor:
    probs = _as_prob_tensor(probs)
    _check(probs, labels)
    y = one_hot(labels, probs.shape[1], dtype=probs.dtype)
    logp = T.log(T.clamp(probs, PROB_FLOOR, 1.0))
    axes = tuple(range(2, probs.ndim))
    n_vox = int(np.prod([probs.shape[a] for a in axes])) if axes else 1
    if axes:
        return -(logp * y).sum(axis=(1,) + axes) * (1.0 / n_vox)
    return -(logp * y).sum(axis=1)


def cross_entropy_loss(probs, labels) -> Tensor:
    """Mean over voxels (and samples) of -log p(true class), probabilities floored at 1e-12."""
    return cross_entropy_per_sample(probs, labels).mean()


def total_loss(probs, labels, dice: bool = True) -> Tensor:
    """Batch-mean Dice + cross-entropy loss; MLP outputs (no spatial axes) use CE alone."""
    probs = _as_prob_tensor(probs)
    ce = cross_entropy_loss(probs, labels)
    if dice and probs.ndim > 2:
        return soft_dice_loss(probs, labels) + ce
    return ce


def energy(loss_sum, weights, lam: float) -> float:
    """U = loss + (lam / 2) * ||w||^2."""
    w = weights.values if isinstance(weights, WeightVector) else np.asarray(weights)
    w = w.astype(np.float64)
    return float(loss_sum) + 0.5 * lam * float(w @ w)


def loss_and_gradient(model: Model, values: np.ndarray, x: np.ndarray, labels: np.ndarray,
                      rng: np.random.Generator | None = None,
                      dropout: bool = False) -> tuple[float, np.ndarray]:
    """Batch-mean loss and its flat gradient (no prior term)."""
    params = {k: Tensor(v, requires_grad=True) for k, v in model.layout.unflatten(values).items()}
    probs = model.forward(params, Tensor(np.asarray(x, dtype=values.dtype)), rng=rng, dropout=dropout)
    loss = total_loss(probs, labels)
    grads = T.backward(loss, params)
    flat = np.concatenate([grads[s.name].ravel() for s in model.layout.specs])
    return float(loss.data), flat.astype(values.dtype, copy=False)


def minibatch_gradient(model: Model, weights: WeightVector | np.ndarray, batch, lam: float,
                       rng: np.random.Generator | None = None, dropout: bool = False,
                       return_loss: bool = False):
    """(1/n_b) sum_i grad L(f_w(x_i), y_i) + lam * w for a batch ``(x, y)``."""
    values = weights.values if isinstance(weights, WeightVector) else np.asarray(weights)
    x, y = batch
    loss, g = loss_and_gradient(model, values, x, y, rng=rng, dropout=dropout)
    g = g + values.dtype.type(lam) * values
    if return_loss:
        return g, loss
    return g
