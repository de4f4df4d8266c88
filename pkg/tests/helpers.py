"""Shared test utilities: scalar-loop oracles and finite-difference checking."""

import numpy as np


def central_difference(f, x, step=1e-4):
    """Central finite-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + step
        hi = f(x)
        xf[i] = orig - step
        lo = f(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def auroc_pairwise_oracle(scores, labels):
    """All-pairs Mann-Whitney AUROC with ties counted half."""
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def ap_threshold_sweep_oracle(scores, labels):
    """AP by explicit descending threshold sweep over observed score values."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    total_pos = int((labels == 1).sum())
    ap = 0.0
    prev_recall = 0.0
    for t in sorted(set(scores.tolist()), reverse=True):
        pred = scores >= t
        tp = int((pred & (labels == 1)).sum())
        fp = int((pred & (labels == 0)).sum())
        precision = tp / (tp + fp)
        recall = tp / total_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def fpr95_sweep_oracle(scores, labels, tpr_target=0.95):
    """Minimum FPR across all observed thresholds whose TPR (>= rule) meets the target."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    total_pos = int((labels == 1).sum())
    total_neg = int((labels == 0).sum())
    best = None
    for t in sorted(set(scores.tolist())):
        pred = scores >= t
        tpr = int((pred & (labels == 1)).sum()) / total_pos
        if tpr >= tpr_target:
            fpr = int((pred & (labels == 0)).sum()) / total_neg
            if best is None or fpr < best:
                best = fpr
    return best


def miou_loop_oracle(pred, gt, space):
    """Per-pixel confusion-matrix loop; returns (miou, macc, per-class iou)."""
    C = space.num_known_classes
    conf = [[0] * C for _ in range(C)]
    for p, g in zip(np.asarray(pred).reshape(-1).tolist(), np.asarray(gt).reshape(-1).tolist()):
        if g == space.ood_id or g == space.ignore_id:
            continue
        conf[g][p] += 1
    ious, recalls = [], []
    per_class = []
    for c in range(C):
        tp = conf[c][c]
        fn = sum(conf[c]) - tp
        fp = sum(conf[r][c] for r in range(C)) - tp
        if tp + fp + fn == 0:
            per_class.append(float("nan"))
            continue
        iou = tp / (tp + fp + fn)
        per_class.append(iou)
        ious.append(iou)
        if tp + fn > 0:
            recalls.append(tp / (tp + fn))
    miou = sum(ious) / len(ious) if ious else float("nan")
    macc = sum(recalls) / len(recalls) if recalls else float("nan")
    return miou, macc, per_class
