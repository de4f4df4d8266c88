"""Offline auto-filtering of failed generations.

Two gates, mirroring the offline quality check run before training:

1. a segmentation oracle (SAM stand-in) segments the object inside its
   bounding box; low IoU against the pasted mask means the object was not
   generated where intended;
2. the object region's mean anomaly score is ranked against the image's own
   inlier pixels; a low percentile means the region looks like a known
   class, i.e. the generator painted background or a known object there.

A kept sample gets its mask revised to the oracle segmentation.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..core import LabelSpace, SegSample
from ..rendering import RenderParams, class_texture_table


@dataclass(frozen=True)
class FilterVerdict:
    keep: bool
    iou_vs_oracle: float
    uncertainty_percentile: float
    revised_mask: np.ndarray | None = None
    note: str = ""

    def to_manifest(self) -> dict:
        return {
            "keep": bool(self.keep),
            "iou_vs_oracle": round(float(self.iou_vs_oracle), 6),
            "uncertainty_percentile": round(float(self.uncertainty_percentile), 4),
            "note": self.note,
        }


class SegmentationOracle(ABC):
    """Box-prompted segmenter used only for filtering (a SAM seam)."""

    @abstractmethod
    def segment(self, sample: SegSample, bbox: tuple[int, int, int, int]) -> np.ndarray:
        """Full-frame boolean mask of the object inside (r0, c0, r1, c1)."""


class PerfectOracle(SegmentationOracle):
    """Returns the ground-truth pasted mask with noisy boundaries.

    Each boundary pixel of the mask is dropped with probability
    ``boundary_noise`` from the oracle's own seeded stream, imitating the
    boundary jitter of a real segmenter while staying reproducible.
    """

    def __init__(self, space: LabelSpace, boundary_noise: float = 0.5, seed: int = 0):
        if not (0.0 <= boundary_noise <= 1.0):
            raise ValueError("boundary_noise must be in [0, 1]")
        self.space = space
        self.boundary_noise = boundary_noise
        self.rng = np.random.default_rng(seed)

    def segment(self, sample: SegSample, bbox) -> np.ndarray:
        r0, c0, r1, c1 = bbox
        box = np.zeros(sample.label.shape, dtype=bool)
        box[r0:r1, c0:c1] = True
        mask = (sample.label == self.space.ood_id) & box
        if self.boundary_noise > 0 and mask.any():
            boundary = mask & ~ndimage.binary_erosion(mask)
            drop = boundary & (self.rng.random(mask.shape) < self.boundary_noise)
            kept = mask & ~drop
            if kept.any():
                mask = kept
        return mask


class ContentOracle(SegmentationOracle):
    """Segments by appearance: pixels inside the box whose color deviates
    from the box-exterior ring.  The threshold adapts to the ring's own
    spread (median + ``mad_factor`` median absolute deviations), so global
    restylings like night or fog do not defeat it.  Responds to blend
    failures the way a real segmenter would: nothing stands out, so the
    mask comes back (near) empty."""

    def __init__(self, mad_factor: float = 3.0, floor: float = 0.02, ring: int = 3):
        self.mad_factor = mad_factor
        self.floor = floor
        self.ring = ring

    def segment(self, sample: SegSample, bbox) -> np.ndarray:
        r0, c0, r1, c1 = bbox
        img = sample.image
        H, W = sample.label.shape
        rr0, cc0 = max(0, r0 - self.ring), max(0, c0 - self.ring)
        rr1, cc1 = min(H, r1 + self.ring), min(W, c1 + self.ring)
        box = np.zeros((H, W), dtype=bool)
        box[r0:r1, c0:c1] = True
        ring = np.zeros((H, W), dtype=bool)
        ring[rr0:rr1, cc0:cc1] = True
        ring &= ~box
        if not ring.any():
            return np.zeros((H, W), dtype=bool)
        ref = np.median(img[:, ring], axis=1)
        smooth = ndimage.uniform_filter(img, size=(1, 3, 3))
        deviation = np.abs(smooth - ref[:, None, None]).mean(axis=0)
        ring_dev = deviation[ring]
        med = float(np.median(ring_dev))
        mad = float(np.median(np.abs(ring_dev - med)))
        threshold = max(med + self.mad_factor * mad, self.floor)
        mask = (deviation > threshold) & box
        if mask.any():
            labels, n = ndimage.label(mask)
            sizes = ndimage.sum_labels(np.ones_like(labels), labels, index=range(1, n + 1))
            mask = labels == (1 + int(np.argmax(sizes)))
        return mask


class UncertaintyScorer(ABC):
    """Produces a per-pixel anomaly map (higher = more anomalous)."""

    @abstractmethod
    def score_map(self, sample: SegSample) -> np.ndarray: ...


class PaletteDistanceScorer(UncertaintyScorer):
    """Model-free scorer for generation-time filtering: distance of each
    (locally smoothed) pixel to the nearest known-class base color."""

    def __init__(self, params: RenderParams):
        self.colors = class_texture_table(params)["colors"]

    def score_map(self, sample: SegSample) -> np.ndarray:
        smooth = ndimage.uniform_filter(sample.image, size=(1, 3, 3))
        flat = smooth.reshape(3, -1).T
        dists = np.linalg.norm(flat[:, None, :] - self.colors[None], axis=2)
        return dists.min(axis=1).reshape(sample.label.shape)


class LabelPrototypeScorer(UncertaintyScorer):
    """Style-robust scorer: class color prototypes are the medians of the
    image's *own* known-class pixels, so a global restyling (night, fog)
    moves the prototypes along with the pixels.  Known-category content
    scores low anywhere; out-of-palette content scores high."""

    def __init__(self, space: LabelSpace):
        self.space = space

    def score_map(self, sample: SegSample) -> np.ndarray:
        smooth = ndimage.uniform_filter(sample.image, size=(1, 3, 3))
        prototypes = []
        for c in range(self.space.num_known_classes):
            sel = sample.label == c
            if sel.any():
                prototypes.append(np.median(smooth[:, sel], axis=1))
        if not prototypes:
            return np.zeros(sample.label.shape)
        protos = np.stack(prototypes)
        flat = smooth.reshape(3, -1).T
        dists = np.linalg.norm(flat[:, None, :] - protos[None], axis=2)
        return dists.min(axis=1).reshape(sample.label.shape)


def auto_filter(sample: SegSample, ood_bbox: tuple[int, int, int, int],
                oracle: SegmentationOracle, unc_model: UncertaintyScorer,
                iou_threshold: float = 0.7,
                unc_threshold_pct: float = 10.0, space: LabelSpace | None = None) -> FilterVerdict:
    """Gate one generated sample; see the module docstring for the two checks."""
    space = space or LabelSpace(num_known_classes=6)
    r0, c0, r1, c1 = ood_bbox
    box = np.zeros(sample.label.shape, dtype=bool)
    box[r0:r1, c0:c1] = True
    pasted = (sample.label == space.ood_id) & box
    if not pasted.any():
        return FilterVerdict(False, 0.0, 0.0, note="no pasted outlier inside the box")

    try:
        oracle_mask = np.asarray(oracle.segment(sample, ood_bbox), dtype=bool)
    except Exception as exc:  # oracle failure is a discard, not a crash
        return FilterVerdict(False, 0.0, 0.0, note=f"oracle failure: {exc}")

    inter = float((oracle_mask & pasted).sum())
    union = float((oracle_mask | pasted).sum())
    iou = inter / union if union else 0.0

    scores = unc_model.score_map(sample)
    region_mean = float(scores[pasted].mean())
    inlier = space.is_known(sample.label)
    if inlier.any():
        ref = scores[inlier]
        pct = 100.0 * ((ref < region_mean).sum() + 0.5 * (ref == region_mean).sum()) / ref.size
    else:
        pct = 100.0
    keep = bool((iou >= iou_threshold) and (pct >= unc_threshold_pct))
    return FilterVerdict(keep=keep, iou_vs_oracle=float(iou),
                         uncertainty_percentile=float(pct),
                         revised_mask=oracle_mask if keep else None)
