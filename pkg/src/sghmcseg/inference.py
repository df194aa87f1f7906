"""Monte-Carlo marginalisation over weight samples and entropy-based uncertainty."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .models import Model, WeightVector, predict


def ensemble_predict(samples: Sequence[WeightVector], model: Model, images: np.ndarray,
                     return_members: bool = False):
    """Mean of the members' softmax maps (probability averaging)."""
    if len(samples) == 0:
        raise ValueError("need at least one weight sample")
    total = None
    members = []
    for w in samples:
        if w.layout != model.layout:
            raise ValueError("weight sample layout does not match the model")
        p = predict(model, w, images).astype(np.float64)
        if return_members:
            members.append(p)
        total = p if total is None else total + p
    mean = total / len(samples)
    if return_members:
        return mean, members
    return mean


def mc_dropout_predict(weights: WeightVector, model: Model, images: np.ndarray, m: int,
                       rng: np.random.Generator, return_members: bool = False):
    """Mean over ``m`` forward passes with freshly sampled dropout masks."""
    if not model.config.sites:
        raise ValueError("model has no dropout layers")
    if m < 1:
        raise ValueError("need m >= 1")
    total = None
    members = []
    for _ in range(m):
        p = predict(model, weights, images, dropout_mode="sample", rng=rng).astype(np.float64)
        if return_members:
            members.append(p)
        total = p if total is None else total + p
    mean = total / m
    if return_members:
        return mean, members
    return mean


def _xlogx(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return out


def entropy_map(probs: np.ndarray, mode: str = "binary", cls: int | None = None,
                class_axis: int = -3) -> np.ndarray:
    """Voxel-wise entropy in nats.

    ``binary``: -p_c ln p_c - (1 - p_c) ln(1 - p_c) for class ``cls``;
    ``categorical``: -sum_c p_c ln p_c.  ``0 ln 0`` is taken as 0.  The class
    axis defaults to the channel axis of (C, H, W) or (N, C, H, W) maps.
    """
    probs = np.asarray(probs, dtype=np.float64)
    c = probs.shape[class_axis]
    if mode == "binary":
        if cls is None:
            raise ValueError("binary entropy needs a class index")
        if not 0 <= cls < c:
            raise ValueError(f"class index {cls} outside 0..{c - 1}")
        p = np.clip(np.take(probs, cls, axis=class_axis), 0.0, 1.0)
        return -(_xlogx(p) + _xlogx(1.0 - p))
    if mode == "categorical":
        if cls is not None:
            raise ValueError("categorical entropy takes no class index")
        return -_xlogx(probs).sum(axis=class_axis)
    raise ValueError("mode must be 'binary' or 'categorical'")


def argmax_segmentation(probs: np.ndarray, class_axis: int = -3) -> np.ndarray:
    """Hard labels; ties go to the lowest class index."""
    return np.argmax(np.asarray(probs), axis=class_axis)
