"""Training objectives: relative contrastive loss over uncertainty gaps,
small-loss pixel selection, selective cross-entropy and dice/BCE, and the
combined total.

The contrastive loss is written over *pairs* of pixels.  Exhaustive pairing
is quadratic in the pixel sets, so each term is a mean over K uniformly
sampled pairs (unbiased for the mean-form objective); when a term has at
most K pairs they are enumerated exactly.  One seeded :class:`PairSampler`
per training run keeps every draw reproducible.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import LabelSpace


@dataclass(frozen=True)
class Margins:
    """Hinge margins (gap priors) of the three contrastive terms."""

    lambda1: float = 10.0
    lambda2: float = 5.0
    lambda3: float = 5.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")

    def scaled(self, factor: float) -> "Margins":
        return Margins(self.lambda1 * factor, self.lambda2 * factor, self.lambda3 * factor)

    @staticmethod
    def pixel_defaults() -> "Margins":
        return Margins(10.0, 5.0, 5.0)

    @staticmethod
    def mask_defaults() -> "Margins":
        return Margins(0.7, 0.5, 0.2)


@dataclass(frozen=True)
class LossWeights:
    """Scale factors putting the segmentation terms on the contrastive term's scale."""

    beta1: float = 50.0
    beta2: float = 10.0

    def __post_init__(self):
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class SelectionMask:
    """Boolean per-pixel selection with the ratio that produced it."""

    eta: np.ndarray
    ratio: float

    @property
    def num_selected(self) -> int:
        return int(self.eta.sum())


def margin_hinge(x: float, lam: float) -> float:
    """tau_lam(x) = max(lam - x, 0); pushes x beyond lam."""
    if lam < 0:
        raise ValueError("margin must be non-negative")
    return max(lam - x, 0.0)


class PairSampler:
    """Seeded pair source for the contrastive terms.

    ``sample_product`` draws index pairs from a product set A x B, and
    ``sample_rows`` draws rows of an explicit pair list.  Whenever the pool
    has at most ``pairs_per_term`` elements it is enumerated exhaustively,
    so small inputs are exact; larger pools are sampled i.i.d. uniformly
    (with replacement), which is unbiased for the mean.
    """

    def __init__(self, pairs_per_term: int = 4096, seed: int = 0):
        if pairs_per_term < 1:
            raise ValueError("pairs_per_term must be >= 1")
        self.pairs_per_term = pairs_per_term
        self.rng = np.random.default_rng(seed)

    def sample_product(self, n_a: int, n_b: int) -> tuple[np.ndarray, np.ndarray]:
        total = n_a * n_b
        if total <= self.pairs_per_term:
            ia, ib = np.divmod(np.arange(total, dtype=np.int64), n_b)
            return ia, ib
        ia = self.rng.integers(0, n_a, size=self.pairs_per_term)
        ib = self.rng.integers(0, n_b, size=self.pairs_per_term)
        return ia, ib

    def sample_rows(self, n: int) -> np.ndarray:
        if n <= self.pairs_per_term:
            return np.arange(n, dtype=np.int64)
        return self.rng.integers(0, n, size=self.pairs_per_term)


@dataclass
class ContrastiveResult:
    loss: float
    terms: tuple[float, float, float]
    grad_in: np.ndarray
    grad_aug: np.ndarray
    grad_out: np.ndarray
    no_pairs: bool = False


def relative_contrastive_terms(u_in: np.ndarray, u_aug: np.ndarray, u_out: np.ndarray,
                               pairs: np.ndarray | None, margins: Margins,
                               sampler: PairSampler) -> ContrastiveResult:
    """Three-term relative contrastive loss with gradients w.r.t. the score vectors.

    Term 1 pushes out-vs-in gaps beyond lambda1, term 2 out-vs-aug gaps
    beyond lambda2, and term 3 (over the explicit same-location ``pairs``,
    rows of (aug index, in index)) penalizes ``-(u_aug - u_in)`` below
    lambda3.  Each term is a mean over its sampled pairs; an empty term
    contributes zero.
    """
    u_in = np.asarray(u_in, dtype=np.float64).reshape(-1)
    u_aug = np.asarray(u_aug, dtype=np.float64).reshape(-1)
    u_out = np.asarray(u_out, dtype=np.float64).reshape(-1)
    g_in = np.zeros_like(u_in)
    g_aug = np.zeros_like(u_aug)
    g_out = np.zeros_like(u_out)

    def hinge_term(x: np.ndarray, lam: float) -> tuple[float, np.ndarray]:
        # value tau_lam(x) and dtau/dx per pair (mean-reduced by the caller)
        active = x < lam
        return float(np.mean(np.maximum(lam - x, 0.0))), np.where(active, -1.0, 0.0) / len(x)

    t1 = t2 = t3 = 0.0
    if len(u_out) and len(u_in):
        io, ii = sampler.sample_product(len(u_out), len(u_in))
        t1, dx = hinge_term(u_out[io] - u_in[ii], margins.lambda1)
        np.add.at(g_out, io, dx)
        np.add.at(g_in, ii, -dx)
    if len(u_out) and len(u_aug):
        io, ic = sampler.sample_product(len(u_out), len(u_aug))
        t2, dx = hinge_term(u_out[io] - u_aug[ic], margins.lambda2)
        np.add.at(g_out, io, dx)
        np.add.at(g_aug, ic, -dx)
    n_pairs = 0 if pairs is None else len(pairs)
    if n_pairs:
        pairs = np.asarray(pairs, dtype=np.int64).reshape(n_pairs, 2)
        rows = sampler.sample_rows(n_pairs)
        ic, ii = pairs[rows, 0], pairs[rows, 1]
        t3, dx = hinge_term(-(u_aug[ic] - u_in[ii]), margins.lambda3)
        np.add.at(g_aug, ic, -dx)
        np.add.at(g_in, ii, dx)

    empty = not ((len(u_out) and len(u_in)) or (len(u_out) and len(u_aug)) or n_pairs)
    if empty:
        warnings.warn("relative contrastive loss has no pairs in any term; returning 0",
                      stacklevel=2)
    return ContrastiveResult(loss=t1 + t2 + t3, terms=(t1, t2, t3),
                             grad_in=g_in, grad_aug=g_aug, grad_out=g_out, no_pairs=empty)


def relative_contrastive_loss(u_in, u_aug, u_out, pairs, margins: Margins,
                              sampler: PairSampler) -> float:
    return relative_contrastive_terms(u_in, u_aug, u_out, pairs, margins, sampler).loss


def absolute_contrastive_terms(u_in: np.ndarray, u_aug: np.ndarray, u_out: np.ndarray,
                               center: float, margins: Margins) -> ContrastiveResult:
    """Ablation baseline that supervises score *values* against a fixed target.

    Outlier scores are pushed above ``center`` by lambda1; inlier and
    augmented-inlier scores below it by lambda2.  Same hinge, no pairing.
    """
    u_in = np.asarray(u_in, dtype=np.float64).reshape(-1)
    u_aug = np.asarray(u_aug, dtype=np.float64).reshape(-1)
    u_out = np.asarray(u_out, dtype=np.float64).reshape(-1)

    def one_sided(u: np.ndarray, lam: float, above: bool) -> tuple[float, np.ndarray]:
        if not len(u):
            return 0.0, np.zeros(0)
        x = (u - center) if above else (center - u)
        active = x < lam
        grad = np.where(active, -1.0, 0.0) / len(u)
        return float(np.mean(np.maximum(lam - x, 0.0))), grad if above else -grad

    t1, g_out = one_sided(u_out, margins.lambda1, above=True)
    t2, g_in = one_sided(u_in, margins.lambda2, above=False)
    t3, g_aug = one_sided(u_aug, margins.lambda2, above=False)
    return ContrastiveResult(loss=t1 + t2 + t3, terms=(t1, t2, t3),
                             grad_in=g_in, grad_aug=g_aug, grad_out=g_out,
                             no_pairs=not (len(u_in) or (len(u_aug)) or len(u_out)))


def build_selection_mask(per_pixel_loss: np.ndarray, eligibility: np.ndarray,
                         ratio: float) -> SelectionMask:
    """Select the ceil(ratio * |eligible|) eligible pixels with the smallest loss.

    Ties break by ascending flat pixel index, so repeated runs are
    bit-identical.  Ineligible pixels are never selected.
    """
    if not (0.0 < ratio <= 1.0):
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    loss = np.asarray(per_pixel_loss, dtype=np.float64)
    eligible = np.asarray(eligibility, dtype=bool)
    if loss.shape != eligible.shape:
        raise ValueError("loss and eligibility shapes differ")
    eta = np.zeros(loss.shape, dtype=bool)
    candidates = np.flatnonzero(eligible.reshape(-1))
    if len(candidates) == 0:
        return SelectionMask(eta=eta, ratio=ratio)
    k = math.ceil(ratio * len(candidates))
    order = np.argsort(loss.reshape(-1)[candidates], kind="stable")
    chosen = candidates[order[:k]]
    eta.reshape(-1)[chosen] = True
    return SelectionMask(eta=eta, ratio=ratio)


def selective_cross_entropy(softmax_probs: np.ndarray, labels: np.ndarray,
                            mask: SelectionMask, space: LabelSpace) -> float:
    """Mean negative log-likelihood over the selected pixels.

    ``softmax_probs`` is (C, H, W) with rows summing to one; selected pixels
    must carry known-class labels.  Empty selection gives 0.
    """
    probs = np.asarray(softmax_probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 3 or probs.shape[1:] != labels.shape:
        raise ValueError("probs must be (C, H, W) matching the label map")
    sums = probs.sum(axis=0)
    if np.abs(sums - 1.0).max() > 1e-5:
        raise ValueError("softmax probabilities do not sum to 1")
    eta = mask.eta
    if eta.shape != labels.shape:
        raise ValueError("selection mask shape differs from labels")
    sel = np.flatnonzero(eta.reshape(-1))
    if len(sel) == 0:
        return 0.0
    y = labels.reshape(-1)[sel]
    if not space.is_known(y).all():
        raise ValueError("selection contains ood/ignore pixels")
    flat = probs.reshape(probs.shape[0], -1)
    return float(-np.mean(np.log(flat[y, sel])))


def selective_cross_entropy_grad(softmax_probs: np.ndarray, labels: np.ndarray,
                                 mask: SelectionMask) -> np.ndarray:
    """Gradient of :func:`selective_cross_entropy` w.r.t. the probability tensor."""
    probs = np.asarray(softmax_probs, dtype=np.float64)
    grad = np.zeros_like(probs)
    sel = np.flatnonzero(mask.eta.reshape(-1))
    if len(sel) == 0:
        return grad
    y = np.asarray(labels).reshape(-1)[sel]
    flat = probs.reshape(probs.shape[0], -1)
    gflat = grad.reshape(grad.shape[0], -1)
    gflat[y, sel] = -1.0 / (len(sel) * flat[y, sel])
    return grad


def _bce_with_logits(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    # stable elementwise binary cross-entropy
    return np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def selective_dice_bce(mask_logits: np.ndarray, target_masks: np.ndarray,
                       ratio: float, return_grad: bool = False):
    """Dice + BCE over the lowest-BCE fraction of pixels of each mask.

    Per mask the ceil(ratio * HW) pixels with the smallest BCE are kept
    (ties by flat index); the loss is the mean BCE over kept pixels plus the
    mean (over masks) dice loss computed on kept pixels with +1 smoothing.
    ``ratio=1`` reduces to the standard unselective dice + BCE.

    With ``return_grad`` the gradient w.r.t. ``mask_logits`` is also
    returned; the selection itself is treated as constant.
    """
    if not (0.0 < ratio <= 1.0):
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    logits = np.asarray(mask_logits, dtype=np.float64)
    targets = np.asarray(target_masks, dtype=np.float64)
    if logits.shape != targets.shape or logits.ndim != 3:
        raise ValueError("mask_logits and target_masks must both be (M, H, W)")
    M = logits.shape[0]
    hw = logits.shape[1] * logits.shape[2]
    k = math.ceil(ratio * hw)

    bce = _bce_with_logits(logits, targets).reshape(M, hw)
    order = np.argsort(bce, axis=1, kind="stable")
    keep = np.zeros((M, hw), dtype=bool)
    np.put_along_axis(keep, order[:, :k], True, axis=1)

    probs = _sigmoid(logits).reshape(M, hw)
    t = targets.reshape(M, hw)
    bce_loss = float(bce[keep].mean())

    inter = np.where(keep, probs * t, 0.0).sum(axis=1)
    denom = np.where(keep, probs, 0.0).sum(axis=1) + np.where(keep, t, 0.0).sum(axis=1) + 1.0
    dice = 1.0 - (2.0 * inter + 1.0) / denom
    dice_loss = float(dice.mean())
    loss = bce_loss + dice_loss
    if not return_grad:
        return loss

    grad = np.zeros((M, hw))
    n_kept = keep.sum()
    grad += np.where(keep, probs - t, 0.0) / n_kept
    # dice: d/dp [1 - (2I+1)/D] = -2t/D + (2I+1)/D^2, chained through sigmoid
    ddice_dp = (-2.0 * t / denom[:, None] + (2.0 * inter + 1.0)[:, None] / denom[:, None] ** 2)
    grad += np.where(keep, ddice_dp * probs * (1.0 - probs), 0.0) / M
    return loss, grad.reshape(logits.shape)


def total_loss(l_unc: float, l_seg_in: float, l_seg_aug: float, w: LossWeights) -> float:
    """Combined objective: uncertainty term plus weighted segmentation terms."""
    terms = (l_unc, l_seg_in, l_seg_aug)
    if not all(np.isfinite(t) for t in terms):
        raise ValueError(f"non-finite loss terms: {terms}")
    return float(l_unc + w.beta1 * l_seg_in + w.beta2 * l_seg_aug)
