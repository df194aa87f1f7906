"""Overlap, surface-distance and voxel-wise calibration metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

PROB_FLOOR = 1e-12


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|A n B| / (|A| + |B|); two empty masks score 1."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


def surface(mask: np.ndarray) -> np.ndarray:
    """Border voxels: foreground voxels with a 4-connected background neighbour (or the frame edge)."""
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(mask.ndim, 1),
                                    border_value=0)
    return mask & ~eroded


def assd(a: np.ndarray, b: np.ndarray, spacing=1.0) -> float:
    """Average symmetric surface distance; ``nan`` if either mask is empty.

    Brute-force pairwise Euclidean distances between border voxels.
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        return float("nan")
    sp = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (a.ndim,))
    pa = np.argwhere(surface(a)) * sp
    pb = np.argwhere(surface(b)) * sp
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return float((d.min(axis=1).sum() + d.min(axis=0).sum()) / (len(pa) + len(pb)))


def _voxels(probs: np.ndarray, labels: np.ndarray, class_axis: int = -3,
            mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim == 2 and labels.ndim == 1:
        p, y = probs, labels
    else:
        p = np.moveaxis(probs, class_axis, -1)
        if p.shape[:-1] != labels.shape:
            raise ValueError(f"probabilities {probs.shape} do not match labels {labels.shape}")
        p = p.reshape(-1, p.shape[-1])
        y = labels.reshape(-1)
    if mask is not None:
        m = np.asarray(mask, dtype=bool).reshape(-1)
        p, y = p[m], y[m]
    return p, y.astype(np.int64)


@dataclass
class CalibrationReport:
    ece: float
    brier: float
    nll: float
    bins: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"ece": self.ece, "brier": self.brier, "nll": self.nll, "bins": self.bins}


def reliability_bins(probs, labels, n_bins: int = 10, class_axis: int = -3, mask=None) -> list[dict]:
    """Equal-width confidence bins, right-closed: (k/B, (k+1)/B], the first also holds 0."""
    if n_bins < 1:
        raise ValueError("need at least one bin")
    p, y = _voxels(probs, labels, class_axis, mask)
    conf = p.max(axis=1)
    correct = (p.argmax(axis=1) == y).astype(np.float64)
    idx = np.clip(np.ceil(conf * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    csum = np.bincount(idx, weights=conf, minlength=n_bins)
    asum = np.bincount(idx, weights=correct, minlength=n_bins)
    bins = []
    for k in range(n_bins):
        n = int(counts[k])
        bins.append({
            "lo": k / n_bins, "hi": (k + 1) / n_bins, "count": n,
            "confidence": float(csum[k] / n) if n else 0.0,
            "accuracy": float(asum[k] / n) if n else 0.0,
        })
    return bins


def ece_from_bins(bins: list[dict]) -> float:
    total = sum(b["count"] for b in bins)
    if total == 0:
        return 0.0
    return float(sum(b["count"] / total * abs(b["confidence"] - b["accuracy"]) for b in bins))


def ece(probs, labels, n_bins: int = 10, class_axis: int = -3, mask=None) -> float:
    """sum_i |B_i|/N * |conf(B_i) - acc(B_i)| over max-probability confidence bins."""
    return ece_from_bins(reliability_bins(probs, labels, n_bins, class_axis, mask))


def brier(probs, labels, class_axis: int = -3, mask=None) -> float:
    p, y = _voxels(probs, labels, class_axis, mask)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(y)), y] = 1.0
    return float(((p - onehot) ** 2).sum(axis=1).mean())


def nll(probs, labels, class_axis: int = -3, mask=None) -> float:
    p, y = _voxels(probs, labels, class_axis, mask)
    pt = np.clip(p[np.arange(len(y)), y], PROB_FLOOR, 1.0)
    return float(-np.log(pt).mean())


def calibration_report(probs, labels, n_bins: int = 10, class_axis: int = -3,
                       foreground_only: bool = False) -> CalibrationReport:
    """ECE, Brier and NLL over all voxels (or only ground-truth foreground voxels)."""
    mask = (np.asarray(labels) > 0) if foreground_only else None
    bins = reliability_bins(probs, labels, n_bins, class_axis, mask)
    return CalibrationReport(ece_from_bins(bins), brier(probs, labels, class_axis, mask),
                             nll(probs, labels, class_axis, mask), bins)


def per_image_calibration(probs: np.ndarray, labels: np.ndarray, n_bins: int = 10) -> dict[str, np.ndarray]:
    """ECE/Brier/NLL of each image of an (N, C, H, W) batch."""
    out = {"ece": [], "brier": [], "nll": []}
    for p, y in zip(probs, labels):
        r = calibration_report(p, y, n_bins)
        out["ece"].append(r.ece)
        out["brier"].append(r.brier)
        out["nll"].append(r.nll)
    return {k: np.asarray(v) for k, v in out.items()}


def per_class_dice(pred: np.ndarray, labels: np.ndarray, classes) -> np.ndarray:
    """Dice per image (rows) and foreground class (columns)."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if pred.ndim == 2:
        pred, labels = pred[None], labels[None]
    return np.array([[dice(p == c, y == c) for c in classes] for p, y in zip(pred, labels)])
