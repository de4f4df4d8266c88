"""Pixel-level evaluation: AUROC / AP / FPR95 over anomaly scores, mIoU / mAcc
over known-class predictions.

All anomaly metrics consume *anomaly-oriented* scores (higher = more
anomalous); see :mod:`dualshift.heads` for the orientation contract.
Conventions pinned here, since benchmark tooling differs at the margins:

* AUROC: rank-based (Mann-Whitney), tied scores counted half.
* AP: descending-score sweep with tied scores collapsed into one threshold
  group, step-wise interpolation, no smoothing.
* FPR95: thresholds are the observed score values only, prediction rule is
  ``score >= t``; the reported value is the FPR at the largest threshold
  whose TPR reaches 0.95.
* mIoU / mAcc: classes absent from both prediction and ground truth are
  excluded from the means; ood / ignore pixels never enter the confusion
  matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import LabelSpace


class MetricUndefinedError(ValueError):
    """Raised when a metric is requested on degenerate input (e.g. one class)."""


@dataclass(frozen=True)
class ScoredPixels:
    """Anomaly scores with binary semantic-shift labels, ignore pixels pre-excluded."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        labels = np.asarray(self.labels).reshape(-1)
        if scores.shape != labels.shape:
            raise ValueError("scores and labels must have equal length")
        if scores.size == 0:
            raise ValueError("need at least one pixel")
        if not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be binary")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int64))

    @property
    def num_positive(self) -> int:
        return int(self.labels.sum())

    @property
    def num_negative(self) -> int:
        return int(self.labels.size - self.labels.sum())


@dataclass
class MetricsReport:
    """Flat report of anomaly-scoring and known-class segmentation quality.

    Anomaly fields are ``None`` when the regime has no positives (or no
    negatives); segmentation fields are ``None`` when no prediction was
    evaluated.
    """

    auroc: float | None = None
    ap: float | None = None
    fpr95: float | None = None
    miou: float | None = None
    macc: float | None = None
    per_class_iou: list[float] | None = None
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "auroc": self.auroc,
            "ap": self.ap,
            "fpr95": self.fpr95,
            "miou": self.miou,
            "macc": self.macc,
            "per_class_iou": self.per_class_iou,
            "counts": self.counts,
        }

    def to_text(self) -> str:
        lines = []
        for key in ("auroc", "ap", "fpr95", "miou", "macc"):
            value = getattr(self, key)
            lines.append(f"{key} = {'n/a' if value is None else f'{value:.6f}'}")
        if self.per_class_iou is not None:
            ious = ", ".join("n/a" if v is None or np.isnan(v) else f"{v:.4f}"
                             for v in self.per_class_iou)
            lines.append(f"per_class_iou = [{ious}]")
        for key, value in sorted(self.counts.items()):
            lines.append(f"count.{key} = {value}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _require_both_classes(sp: ScoredPixels, name: str) -> None:
    if sp.num_positive == 0 or sp.num_negative == 0:
        raise MetricUndefinedError(f"{name} undefined: needs both positive and negative pixels "
                                   f"(got {sp.num_positive} positives, {sp.num_negative} negatives)")


def auroc(sp: ScoredPixels) -> float:
    """Area under the ROC curve, ties counted half (Mann-Whitney statistic)."""
    _require_both_classes(sp, "AUROC")
    order = np.argsort(sp.scores, kind="stable")
    sorted_scores = sp.scores[order]
    ranks = np.empty_like(sorted_scores)
    # average ranks over tie groups, 1-based
    boundaries = np.flatnonzero(np.diff(sorted_scores) != 0) + 1
    starts = np.concatenate(([0], boundaries))
    stops = np.concatenate((boundaries, [len(sorted_scores)]))
    for a, b in zip(starts, stops):
        ranks[a:b] = 0.5 * (a + b + 1)
    rank_of = np.empty_like(ranks)
    rank_of[order] = ranks
    n_pos, n_neg = sp.num_positive, sp.num_negative
    rank_sum = rank_of[sp.labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(sp: ScoredPixels) -> float:
    """AP with tied scores treated as a single threshold group."""
    if sp.num_positive == 0:
        raise MetricUndefinedError("AP undefined: no positive pixels")
    order = np.argsort(-sp.scores, kind="stable")
    labels = sp.labels[order]
    scores = sp.scores[order]
    tp = np.cumsum(labels)
    fp = np.cumsum(1 - labels)
    # keep only the last index of each tie group: one operating point per threshold
    last = np.flatnonzero(np.diff(scores) != 0)
    last = np.concatenate((last, [len(scores) - 1]))
    tp_g, fp_g = tp[last], fp[last]
    precision = tp_g / (tp_g + fp_g)
    delta_tp = np.diff(np.concatenate(([0], tp_g)))
    return float((precision * delta_tp).sum() / sp.num_positive)


def fpr_at_95_tpr(sp: ScoredPixels, tpr_target: float = 0.95) -> float:
    """FPR at the highest observed-score threshold whose TPR (with ``>=``) reaches the target."""
    _require_both_classes(sp, "FPR95")
    order = np.argsort(-sp.scores, kind="stable")
    labels = sp.labels[order]
    scores = sp.scores[order]
    tp = np.cumsum(labels)
    fp = np.cumsum(1 - labels)
    last = np.flatnonzero(np.diff(scores) != 0)
    last = np.concatenate((last, [len(scores) - 1]))
    tpr = tp[last] / sp.num_positive
    fpr = fp[last] / sp.num_negative
    hit = np.flatnonzero(tpr >= tpr_target)
    # thresholds are visited in descending order, so the first hit is the largest one
    return float(fpr[hit[0]])


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, space: LabelSpace) -> np.ndarray:
    """C x C confusion counts over known-class ground-truth pixels (rows = gt)."""
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth shapes differ")
    keep = space.is_known(gt)
    p = pred[keep].astype(np.int64).ravel()
    g = gt[keep].astype(np.int64).ravel()
    if p.size and (p.min() < 0 or p.max() >= space.num_known_classes):
        raise ValueError("prediction contains values outside the known class range")
    C = space.num_known_classes
    return np.bincount(g * C + p, minlength=C * C).reshape(C, C)


def miou_macc(pred, gt, space: LabelSpace) -> tuple[float, float, np.ndarray]:
    """Mean IoU, mean per-class accuracy, and the per-class IoU vector.

    Accepts single maps or lists of maps (accumulated into one confusion
    matrix).  Classes absent from both pred and gt get ``nan`` in the
    per-class vector and are excluded from the means; mAcc additionally
    requires the class to be present in the ground truth.
    """
    preds = pred if isinstance(pred, (list, tuple)) else [pred]
    gts = gt if isinstance(gt, (list, tuple)) else [gt]
    if len(preds) != len(gts):
        raise ValueError("need matching numbers of prediction and gt maps")
    C = space.num_known_classes
    conf = np.zeros((C, C), dtype=np.int64)
    for p, g in zip(preds, gts):
        conf += confusion_matrix(p, g, space)
    tp = np.diag(conf).astype(np.float64)
    gt_count = conf.sum(axis=1).astype(np.float64)
    pred_count = conf.sum(axis=0).astype(np.float64)
    union = gt_count + pred_count - tp
    iou = np.full(C, np.nan)
    present = union > 0
    iou[present] = tp[present] / union[present]
    recall = np.full(C, np.nan)
    in_gt = gt_count > 0
    recall[in_gt] = tp[in_gt] / gt_count[in_gt]
    miou = float(np.nanmean(iou)) if present.any() else float("nan")
    macc = float(np.nanmean(recall)) if in_gt.any() else float("nan")
    return miou, macc, iou
