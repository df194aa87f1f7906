"""Image-level confidence from entropy maps, failure labels and ROC/AUC."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .inference import argmax_segmentation, entropy_map
from .metrics import assd, dice

LN2 = math.log(2.0)


def normalized_binary_entropy(probs: np.ndarray, cls: int, class_axis: int = -3) -> np.ndarray:
    """Binary entropy of class ``cls`` divided by ln 2, so values lie in [0, 1]."""
    return np.clip(entropy_map(probs, "binary", cls, class_axis) / LN2, 0.0, 1.0)


def tf_ff_fb(seg: np.ndarray, h: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Soft true-foreground, false-foreground and false-background maps."""
    s = np.asarray(seg, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if s.shape != h.shape:
        raise ValueError(f"segmentation {s.shape} and entropy {h.shape} differ in shape")
    return s * (1.0 - h), s * h, (1.0 - s) * h


def confidence_score(seg: np.ndarray, h: np.ndarray, return_flag: bool = False):
    """2|TF| / (2|TF| + |FF| + |FB|).

    An empty segmentation with zero entropy has no defined score; it is
    reported as 0 with ``flag=True``.
    """
    tf, ff, fb = tf_ff_fb(seg, h)
    num = 2.0 * tf.sum()
    den = num + ff.sum() + fb.sum()
    flag = den == 0
    score = 0.0 if flag else float(num / den)
    return (score, bool(flag)) if return_flag else score


def label_failure(dice_score: float, assd_value: float, dice_thresh: float = 0.8,
                  assd_thresh: float = 2.0, rule: str = "and") -> bool:
    """Failure iff Dice < dice_thresh AND ASSD > assd_thresh (``rule="or"`` relaxes it).

    An undefined (nan) ASSD counts as a failure.
    """
    if assd_value is None or (isinstance(assd_value, float) and math.isnan(assd_value)):
        return True
    low = dice_score < dice_thresh
    far = assd_value > assd_thresh
    if rule == "and":
        return bool(low and far)
    if rule == "or":
        return bool(low or far)
    raise ValueError("rule must be 'and' or 'or'")


def roc_curve(scores: Sequence[float], failures: Sequence[bool]) -> np.ndarray:
    """ROC points (threshold, FPR, TPR); low confidence flags a failure."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(failures, dtype=bool)
    if y.all() or not y.any():
        raise ValueError("ROC needs both failures and non-failures")
    # detector: predict failure when score <= threshold
    thr = np.unique(s)
    pos, neg = y.sum(), (~y).sum()
    order = np.argsort(s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    last = np.searchsorted(s_sorted, thr, side="right") - 1
    pts = [(-np.inf, 0.0, 0.0)]
    pts += [(float(t), fp[i] / neg, tp[i] / pos) for t, i in zip(thr, last)]
    return np.array(pts)


def roc_auc(scores: Sequence[float], failures: Sequence[bool]) -> tuple[float, np.ndarray]:
    """Trapezoidal AUC over all thresholds; tied scores contribute one half."""
    pts = roc_curve(scores, failures)
    auc = float(np.trapezoid(pts[:, 2], pts[:, 1]))
    return auc, pts


def mann_whitney_auc(scores: Sequence[float], failures: Sequence[bool]) -> float:
    """P(score of a failure < score of a non-failure) + 0.5 P(tie), by pair counting."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(failures, dtype=bool)
    f, ok = s[y], s[~y]
    if len(f) == 0 or len(ok) == 0:
        raise ValueError("need both failures and non-failures")
    less = (f[:, None] < ok[None, :]).sum()
    ties = (f[:, None] == ok[None, :]).sum()
    return float((less + 0.5 * ties) / (len(f) * len(ok)))


@dataclass
class FailureReport:
    rows: list[dict] = field(default_factory=list)
    auc: dict[str, float] = field(default_factory=dict)
    roc: dict[str, np.ndarray] = field(default_factory=dict)

    def column(self, key: str, cls: int | None = None) -> np.ndarray:
        return np.array([r[key] for r in self.rows if cls is None or r["class"] == cls])

    def to_dict(self) -> dict:
        return {"rows": self.rows, "auc": self.auc,
                "roc": {k: v.tolist() for k, v in self.roc.items()}}


def failure_report(probs: np.ndarray, labels: np.ndarray, classes: Sequence[int],
                   dice_thresh: float = 0.8, assd_thresh: float = 2.0, spacing=1.0,
                   rule: str = "and") -> FailureReport:
    """Per (image, class) Dice, ASSD, confidence and failure label; AUC per class and pooled."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    seg = argmax_segmentation(probs)
    rows = []
    for i in range(len(probs)):
        for c in classes:
            s_c = seg[i] == c
            h_c = normalized_binary_entropy(probs[i], c, class_axis=0)
            conf, flag = confidence_score(s_c, h_c, return_flag=True)
            d = dice(s_c, labels[i] == c)
            a = assd(s_c, labels[i] == c, spacing)
            rows.append({
                "image": i, "class": int(c), "dice": d, "assd": a, "confidence": conf,
                "undefined_confidence": flag,
                "failure": label_failure(d, a, dice_thresh, assd_thresh, rule),
            })
    rep = FailureReport(rows)
    groups = {str(c): [r for r in rows if r["class"] == c] for c in classes}
    groups["all"] = rows
    for name, rs in groups.items():
        f = [r["failure"] for r in rs]
        if any(f) and not all(f):
            auc, pts = roc_auc([r["confidence"] for r in rs], f)
            rep.auc[name] = auc
            rep.roc[name] = pts
        else:
            rep.auc[name] = float("nan")
    return rep
