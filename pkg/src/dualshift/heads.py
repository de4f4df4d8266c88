"""Learnable semantic-exclusive uncertainty heads.

Two parameterizations over a learnable projection ``weights`` of shape (F, C)
initialized from the classifier head of a pretrained segmentation network:

* ``pixel_energy``: per-pixel logsumexp over the projected class logits,
* ``mask_msp``: per-pixel max over classes of the mask-weighted class
  probability map used by query-based mask segmenters.

Orientation contract
--------------------
Both raw head outputs are confidence-like at initialization (high = known).
Every consumer that needs an *anomaly* score (metrics, the contrastive loss
fed by the trainer, the auto-filter) applies :func:`anomaly_score`, which
negates by default (``sign=-1``).  A single knob, applied uniformly, so a
mis-oriented AUROC cannot creep in silently.

Gradients are hand-written vector-Jacobian products; the finite-difference
suite in the tests pins them down.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

DEFAULT_SCORE_SIGN = -1.0


class HeadMode(str, Enum):
    PIXEL_ENERGY = "pixel_energy"
    MASK_MSP = "mask_msp"


@dataclass
class UncertaintyHead:
    """Learnable projection (F, C) plus the parameterization mode."""

    weights: np.ndarray
    mode: HeadMode = HeadMode.PIXEL_ENERGY

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.mode = HeadMode(self.mode)
        if self.weights.ndim != 2:
            raise ValueError("head weights must be a (F, C) matrix")
        if not np.isfinite(self.weights).all():
            raise ValueError("head weights contain non-finite entries")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "UncertaintyHead":
        return UncertaintyHead(self.weights.copy(), self.mode)


@dataclass(frozen=True)
class FeatureBundle:
    """Features (M, F) plus, for mask mode, pre-sigmoid mask logits (M, H, W)."""

    features: np.ndarray
    mask_logits: np.ndarray | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ValueError("features must be a non-empty (M, F) matrix")
        object.__setattr__(self, "features", feats)
        if self.mask_logits is not None:
            ml = np.asarray(self.mask_logits, dtype=np.float64)
            if ml.ndim != 3 or ml.shape[0] != feats.shape[0]:
                raise ValueError("mask_logits must be (M, H, W) with M matching features")
            object.__setattr__(self, "mask_logits", ml)


def init_from_class_head(class_weights: np.ndarray, mode: HeadMode | str,
                         num_classes: int | None = None) -> UncertaintyHead:
    """Initialize the head as an independent copy of the classifier weights.

    At this initialization, the pixel-energy head reproduces the frozen
    model's energy score and the mask head its adapted-MSP score exactly.
    """
    w = np.asarray(class_weights, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("class weights must be a (F, C) matrix")
    if not np.isfinite(w).all():
        raise ValueError("class weights contain non-finite entries")
    if num_classes is not None and w.shape[1] != num_classes:
        raise ValueError(f"class weights have {w.shape[1]} columns, expected {num_classes}")
    return UncertaintyHead(weights=w.copy(), mode=HeadMode(mode))


def anomaly_score(u: np.ndarray, sign: float = DEFAULT_SCORE_SIGN) -> np.ndarray:
    """Map a raw head output to the anomaly orientation (higher = more anomalous)."""
    return sign * np.asarray(u)


def logsumexp(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtraction stabilized logsumexp; required so large logits cannot overflow."""
    m = np.max(z, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(z, axis=axis, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=axis, keepdims=True)


def pixel_energy_uncertainty(features: np.ndarray, head: UncertaintyHead) -> np.ndarray:
    """Energy-form score: logsumexp over classes of ``features @ weights``, per row."""
    if head.mode is not HeadMode.PIXEL_ENERGY:
        raise ValueError(f"head mode is {head.mode.value}, expected pixel_energy")
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError("features must be (M, F)")
    if not np.isfinite(feats).all():
        raise ValueError("features contain non-finite values")
    return logsumexp(feats @ head.weights, axis=1)


def pixel_energy_vjp(features: np.ndarray, head: UncertaintyHead,
                     u_bar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(u_bar * u)`` w.r.t. features and head weights."""
    feats = np.asarray(features, dtype=np.float64)
    z_bar = softmax(feats @ head.weights, axis=1) * np.asarray(u_bar, dtype=np.float64)[:, None]
    return z_bar @ head.weights.T, feats.T @ z_bar


def mask_msp_uncertainty(bundle: FeatureBundle, head: UncertaintyHead) -> np.ndarray:
    """Adapted-MSP score map: max over classes of the mask-weighted class probabilities.

    Per class c the map is ``sum_m softmax(features @ weights)[m, c] *
    sigmoid(mask_logits)[m]``; values lie in [0, M].
    """
    if head.mode is not HeadMode.MASK_MSP:
        raise ValueError(f"head mode is {head.mode.value}, expected mask_msp")
    if bundle.mask_logits is None:
        raise ValueError("mask_msp mode requires mask_logits")
    probs = softmax(bundle.features @ head.weights, axis=1)        # (M, C)
    masks = _sigmoid(bundle.mask_logits)                           # (M, H, W)
    class_maps = np.einsum("mc,mhw->chw", probs, masks)
    return class_maps.max(axis=0)


def mask_msp_vjp(bundle: FeatureBundle, head: UncertaintyHead,
                 map_bar: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of ``sum(map_bar * u)`` w.r.t. (features, weights, mask_logits).

    The max over classes routes gradient to the argmax class per pixel
    (subgradient; ties resolved by the first argmax).
    """
    feats = bundle.features
    z = feats @ head.weights
    probs = softmax(z, axis=1)                                     # (M, C)
    masks = _sigmoid(bundle.mask_logits)                           # (M, H, W)
    class_maps = np.einsum("mc,mhw->chw", probs, masks)            # (C, H, W)
    winner = class_maps.argmax(axis=0)                             # (H, W)
    C = head.num_classes
    # scatter map_bar into the winning class channel
    maps_bar = np.zeros_like(class_maps)
    hh, ww = np.indices(winner.shape)
    maps_bar[winner, hh, ww] = np.asarray(map_bar, dtype=np.float64)
    probs_bar = np.einsum("chw,mhw->mc", maps_bar, masks)
    masks_bar = np.einsum("chw,mc->mhw", maps_bar, probs)
    z_bar = probs * (probs_bar - (probs_bar * probs).sum(axis=1, keepdims=True))
    logits_bar = masks_bar * masks * (1.0 - masks)
    return z_bar @ head.weights.T, feats.T @ z_bar, logits_bar


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out
