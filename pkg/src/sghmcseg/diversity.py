"""Weight-space and function-space diversity of posterior samples, and loss planes."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .models import WeightVector

log = logging.getLogger(__name__)

DICE_SMOOTH = 1e-5


def _matrix(samples: Sequence[WeightVector | np.ndarray]) -> np.ndarray:
    cols = [np.asarray(s.values if isinstance(s, WeightVector) else s, dtype=np.float64) for s in samples]
    if len({c.size for c in cols}) > 1:
        raise ValueError("samples have different lengths")
    return np.stack(cols, axis=1)


def cosine_matrix(samples: Sequence[WeightVector | np.ndarray]) -> np.ndarray:
    """Pairwise <w_i, w_j> / (|w_i| |w_j|)."""
    if len(samples) < 2:
        raise ValueError("need at least two samples")
    w = _matrix(samples)
    norms = np.linalg.norm(w, axis=0)
    if np.any(norms == 0):
        raise ValueError("zero-norm weight vector")
    g = (w.T @ w) / np.outer(norms, norms)
    g = 0.5 * (g + g.T)
    np.fill_diagonal(g, 1.0)
    return g


def singular_values(samples) -> np.ndarray:
    """Singular values of W = [w_1 ... w_M] via the M x M Gram matrix, descending."""
    w = _matrix(samples)
    ev = np.linalg.eigvalsh(w.T @ w)[::-1]
    return np.sqrt(np.clip(ev, 0.0, None))


def explored_volume(samples, n_sigma: int = 5, rtol: float = 1e-10) -> float:
    """Product of the ``n_sigma`` largest singular values of the sample matrix.

    Returns 0 (with a warning) when the matrix rank is below ``n_sigma``.
    """
    if n_sigma < 1:
        raise ValueError("n_sigma must be >= 1")
    s = singular_values(samples)
    rank = int((s > rtol * s[0]).sum()) if len(s) and s[0] > 0 else 0
    if rank < n_sigma:
        warnings.warn(f"sample matrix has rank {rank} < n_sigma={n_sigma}; volume is 0")
        return 0.0
    return float(np.prod(s[:n_sigma]))


def _masked_dice(a: np.ndarray, b: np.ndarray, classes: Sequence[int]) -> float | None:
    """Smoothed Dice averaged over foreground classes present in either masked prediction."""
    scores = []
    for c in classes:
        am, bm = a == c, b == c
        s = am.sum() + bm.sum()
        if s == 0:
            continue
        scores.append((2.0 * np.logical_and(am, bm).sum() + DICE_SMOOTH) / (s + DICE_SMOOTH))
    return float(np.mean(scores)) if scores else None


def functional_distance(pred_i: np.ndarray, pred_j: np.ndarray, error_mask: np.ndarray,
                        classes: Sequence[int] | None = None) -> float:
    """1 - mean over images of Dice(e * f_i, e * f_j) restricted to ensemble-error voxels.

    Inputs are hard label maps, (N, H, W) or (H, W).  Voxels outside the error
    mask are set to background before the Dice.  Images whose error mask is
    empty are skipped; if every mask is empty the distance is ``nan``.
    """
    pi, pj, e = (np.asarray(a) for a in (pred_i, pred_j, error_mask))
    if pi.shape != pj.shape or pi.shape != e.shape:
        raise ValueError("predictions and error mask must share a shape")
    if pi.ndim == 2:
        pi, pj, e = pi[None], pj[None], e[None]
    e = e.astype(bool)
    if classes is None:
        classes = [c for c in np.union1d(np.unique(pi), np.unique(pj)) if c != 0]
    vals = []
    skipped = 0
    for a, b, m in zip(pi, pj, e):
        if not m.any():
            skipped += 1
            continue
        d = _masked_dice(np.where(m, a, 0), np.where(m, b, 0), classes)
        # both masked predictions background-only: identical on the error region
        vals.append(1.0 if d is None else d)
    if skipped:
        log.debug("functional_distance skipped %d images with empty error masks", skipped)
    if not vals:
        return float("nan")
    return float(1.0 - np.mean(vals))


@dataclass
class DiversityReport:
    functional: np.ndarray
    row_means: np.ndarray
    cosine: np.ndarray | None = None
    volume: float | None = None
    labels: list[str] = field(default_factory=list)

    @property
    def mean_distance(self) -> float:
        """Mean off-diagonal functional distance among the members (ensemble row excluded)."""
        m = self.functional.shape[0] - 1
        sub = self.functional[:m, :m]
        return float(sub[~np.eye(m, dtype=bool)].mean())

    def to_dict(self) -> dict:
        return {
            "functional": self.functional.tolist(),
            "row_means": self.row_means.tolist(),
            "mean_distance": self.mean_distance,
            "cosine": None if self.cosine is None else self.cosine.tolist(),
            "volume": self.volume,
            "labels": self.labels,
        }


def diversity_confusion(sample_preds: Sequence[np.ndarray], ensemble_pred: np.ndarray,
                        truth: np.ndarray, classes: Sequence[int] | None = None,
                        samples: Sequence[WeightVector] | None = None,
                        n_sigma: int = 5) -> DiversityReport:
    """(M+1) x (M+1) functional-distance matrix, the ensemble as last row/column.

    Row means exclude the zero diagonal.
    """
    if len(sample_preds) < 2:
        raise ValueError("need at least two sample predictions")
    preds = list(sample_preds) + [ensemble_pred]
    err = np.asarray(ensemble_pred) != np.asarray(truth)
    k = len(preds)
    d = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            d[i, j] = d[j, i] = functional_distance(preds[i], preds[j], err, classes)
    row_means = d.sum(axis=1) / (k - 1)
    cos = vol = None
    if samples is not None:
        cos = cosine_matrix(samples)
        if len(samples) >= n_sigma:
            vol = explored_volume(samples, n_sigma)
    labels = [str(i) for i in range(k - 1)] + ["E"]
    return DiversityReport(d, row_means, cos, vol, labels)


def _gram_schmidt_plane(w1, w2, w3):
    a = w2 - w1
    b = w3 - w1
    na = np.linalg.norm(a)
    if na == 0:
        raise ValueError("degenerate anchors: w2 == w1")
    u = a / na
    b_perp = b - (b @ u) * u
    nb = np.linalg.norm(b_perp)
    if nb <= 1e-12 * max(np.linalg.norm(b), 1.0):
        raise ValueError("degenerate anchors: collinear")
    return u, b_perp / nb


def plane_coordinates(anchors: Sequence[np.ndarray]) -> list[tuple[float, float]]:
    """(a, b) coordinates of the three anchors in the Gram-Schmidt plane through w1."""
    w1, w2, w3 = (np.asarray(a, dtype=np.float64) for a in anchors)
    u, v = _gram_schmidt_plane(w1, w2, w3)
    return [(0.0, 0.0), (float((w2 - w1) @ u), float((w2 - w1) @ v)),
            (float((w3 - w1) @ u), float((w3 - w1) @ v))]


def pca_directions(samples, n_components: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Mean and the leading principal directions (rows) of the centred samples."""
    w = _matrix(samples).T
    mean = w.mean(axis=0)
    _, _, vt = np.linalg.svd(w - mean, full_matrices=False)
    return mean, vt[:n_components]


def loss_plane(mode: str, anchors, alphas: np.ndarray, betas: np.ndarray,
               loss_fn: Callable[[np.ndarray], float],
               components: tuple[int, int] = (2, 3)) -> np.ndarray:
    """Loss on a 2-D grid of weight-space points.

    ``pca``: ``anchors`` are >= 6 same-mode samples; points are
    ``mean + a v_i + b v_j`` with 1-based component indices ``components``.
    ``gram-schmidt``: exactly three anchors; points are ``w1 + a u + b v``
    with (u, v) the orthonormalised (w2 - w1, w3 - w1).
    Returns an array of shape (len(alphas), len(betas)).
    """
    anchors = [a.values if isinstance(a, WeightVector) else np.asarray(a) for a in anchors]
    if mode == "pca":
        if len(anchors) < 6:
            raise ValueError("pca mode needs at least 6 samples")
        mean, comps = pca_directions(anchors, max(5, max(components)))
        origin = mean
        u, v = comps[components[0] - 1], comps[components[1] - 1]
    elif mode == "gram-schmidt":
        if len(anchors) != 3:
            raise ValueError("gram-schmidt mode needs exactly three anchors")
        origin = np.asarray(anchors[0], dtype=np.float64)
        u, v = _gram_schmidt_plane(*(np.asarray(a, dtype=np.float64) for a in anchors))
    else:
        raise ValueError("mode must be 'pca' or 'gram-schmidt'")
    dtype = np.asarray(anchors[0]).dtype
    grid = np.empty((len(alphas), len(betas)))
    for i, a in enumerate(alphas):
        for j, b in enumerate(betas):
            grid[i, j] = loss_fn((origin + a * u + b * v).astype(dtype))
    return grid
