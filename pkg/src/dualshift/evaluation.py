"""Model evaluation over the toy benchmark regimes.

Pixel-mode scoring: the anomaly map is the signed energy of the per-pixel
features under the uncertainty projection; known-class predictions come from
the model's classifier.  Anomaly metrics need both inlier and outlier pixels
and are reported as ``None`` for regimes without outliers.
"""

from __future__ import annotations

import numpy as np

from .core import LabelSpace, SegSample
from .heads import DEFAULT_SCORE_SIGN
from .metrics import MetricsReport, ScoredPixels, auroc, average_precision, fpr_at_95_tpr, miou_macc
from .model import ToySegModel, batch_images, energy_map


def score_samples(model: ToySegModel, head_weights: np.ndarray, samples: list[SegSample],
                  sign: float = DEFAULT_SCORE_SIGN, batch_size: int = 8):
    """Anomaly maps and class predictions for a list of samples."""
    anomaly_maps, preds = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        feats, logits = model.forward(batch_images(chunk))
        u = energy_map(feats, head_weights)
        for i in range(len(chunk)):
            anomaly_maps.append(sign * u[i])
            preds.append(logits[i].argmax(axis=0))
    return anomaly_maps, preds


def collect_scored_pixels(anomaly_maps, samples, space: LabelSpace) -> ScoredPixels | None:
    scores, labels = [], []
    for amap, sample in zip(anomaly_maps, samples):
        keep = sample.label != space.ignore_id
        scores.append(amap[keep])
        labels.append((sample.label[keep] == space.ood_id).astype(np.int64))
    scores = np.concatenate(scores)
    labels = np.concatenate(labels)
    if labels.min() == labels.max():
        return None
    return ScoredPixels(scores, labels)


def evaluate_regime(model: ToySegModel, head_weights: np.ndarray, samples: list[SegSample],
                    space: LabelSpace, sign: float = DEFAULT_SCORE_SIGN,
                    batch_size: int = 8) -> MetricsReport:
    anomaly_maps, preds = score_samples(model, head_weights, samples, sign, batch_size)
    gts = [s.label for s in samples]
    miou, macc, per_class = miou_macc(preds, gts, space)
    report = MetricsReport(miou=miou, macc=macc,
                           per_class_iou=[float(v) for v in per_class])
    sp = collect_scored_pixels(anomaly_maps, samples, space)
    if sp is not None:
        report.auroc = auroc(sp)
        report.ap = average_precision(sp)
        report.fpr95 = fpr_at_95_tpr(sp)
        report.counts["outlier_pixels"] = sp.num_positive
        report.counts["inlier_pixels"] = sp.num_negative
    report.counts["samples"] = len(samples)
    return report


def regime_reports(model: ToySegModel, head_weights: np.ndarray,
                   splits: dict[str, list[SegSample]], space: LabelSpace,
                   part: str = "val", sign: float = DEFAULT_SCORE_SIGN) -> dict[str, MetricsReport]:
    """One report per evaluation regime (in / cov / sem / joint) of a part."""
    out = {}
    for regime in ("in", "cov", "sem", "joint"):
        key = f"{part}_{regime}"
        if key in splits:
            out[regime] = evaluate_regime(model, head_weights, splits[key], space, sign)
    return out


def uncertainty_gap_statistics(model: ToySegModel, head_weights: np.ndarray,
                               pairs, space: LabelSpace,
                               sign: float = DEFAULT_SCORE_SIGN) -> dict[str, float]:
    """Mean anomaly score of the outlier / inlier / augmented-inlier pixel sets.

    The semantic-exclusive property reads as gap_out = mean(out) - mean(in)
    far exceeding gap_aug = mean(aug) - mean(in).
    """
    buckets = {"in": [], "aug": [], "out": []}
    for pair in pairs:
        for source, sample in (("in", pair.original), ("aug", pair.augmented)):
            feats, _ = model.forward(batch_images([sample]))
            amap = sign * energy_map(feats, head_weights)[0]
            known = space.is_known(sample.label)
            buckets[source].append(amap[known])
            buckets["out"].append(amap[sample.label == space.ood_id])
    means = {k: float(np.concatenate(v).mean()) if any(len(x) for x in v) else float("nan")
             for k, v in buckets.items()}
    return {
        "mean_out": means["out"], "mean_in": means["in"], "mean_aug": means["aug"],
        "gap_out": means["out"] - means["in"],
        "gap_aug": means["aug"] - means["in"],
    }
