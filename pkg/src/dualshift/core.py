"""Domain vocabulary: label spaces, samples, augmented pairs, pixel index sets.

Conventions used throughout the package:

* known classes are 0-indexed ``0 .. C-1``,
* ``ood_id`` marks semantic-shift (outlier) pixels,
* ``ignore_id`` marks void pixels excluded from every loss and metric,
* images are float arrays of shape (3, H, W) with values in [0, 1],
* label maps are integer arrays of shape (H, W).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

OOD_ID = 254
IGNORE_ID = 255


@dataclass(frozen=True)
class LabelSpace:
    """The known class set plus the reserved outlier / void label values."""

    num_known_classes: int
    ood_id: int = OOD_ID
    ignore_id: int = IGNORE_ID

    def __post_init__(self):
        if self.num_known_classes < 2:
            raise ValueError("need at least 2 known classes")
        if self.ood_id == self.ignore_id:
            raise ValueError("ood_id and ignore_id must differ")
        for name in ("ood_id", "ignore_id"):
            value = getattr(self, name)
            if 0 <= value < self.num_known_classes:
                raise ValueError(f"{name}={value} collides with the known class range")

    def is_known(self, label: np.ndarray) -> np.ndarray:
        """Boolean map of pixels carrying a known-class label."""
        return (label >= 0) & (label < self.num_known_classes)

    def is_valid(self, label: np.ndarray) -> np.ndarray:
        return self.is_known(label) | (label == self.ood_id) | (label == self.ignore_id)


@dataclass(frozen=True)
class SegSample:
    """One image / label-map pair."""

    image: np.ndarray
    label: np.ndarray
    sample_id: str = ""

    @property
    def height(self) -> int:
        return self.label.shape[0]

    @property
    def width(self) -> int:
        return self.label.shape[1]


@dataclass(frozen=True)
class AugmentedPair:
    """An original sample with its coherently augmented counterpart.

    ``pair_valid`` marks pixels where both label maps carry a known-class
    label; only those locations may form same-position pairs in the third
    term of the relative contrastive loss.
    """

    original: SegSample
    augmented: SegSample
    pair_valid: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.original.label.shape != self.augmented.label.shape:
            raise ValueError("original and augmented label maps differ in shape")
        if self.pair_valid is None:
            object.__setattr__(self, "pair_valid", np.ones(self.original.label.shape, dtype=bool))


@dataclass(frozen=True)
class IndexSets:
    """Flattened (sample, pixel) coordinates of the three contrastive pixel sets.

    Each array has shape (n, 3) with columns (pair index, flat pixel index,
    source) where source is 0 for the original image and 1 for the augmented
    image.  Flat coordinates rather than boolean masks so the pair sampler
    has O(1) random access.
    """

    in_idx: np.ndarray
    aug_idx: np.ndarray
    out_idx: np.ndarray

    def __len__(self) -> int:
        return len(self.in_idx) + len(self.aug_idx) + len(self.out_idx)


def validate_sample(sample: SegSample, space: LabelSpace) -> list[str]:
    """Collect every invariant violation of ``sample``; empty list means ok."""
    violations = []
    img, lab = sample.image, sample.label
    if img.ndim != 3 or img.shape[0] != 3:
        violations.append(f"image shape {img.shape} is not (3, H, W)")
    elif lab.shape != img.shape[1:]:
        violations.append(f"label shape {lab.shape} does not match image {img.shape[1:]}")
    if lab.ndim != 2:
        violations.append(f"label shape {lab.shape} is not (H, W)")
    if not np.issubdtype(lab.dtype, np.integer):
        violations.append(f"label dtype {lab.dtype} is not integer")
    else:
        bad = ~space.is_valid(lab)
        if bad.any():
            values = sorted(np.unique(lab[bad]).tolist())
            violations.append(f"label values outside the label space: {values}")
    if np.issubdtype(img.dtype, np.floating):
        if not np.isfinite(img).all():
            violations.append("image has non-finite values")
        elif img.size and (img.min() < 0.0 or img.max() > 1.0):
            violations.append(f"image range [{img.min():.4g}, {img.max():.4g}] exceeds [0, 1]")
    else:
        violations.append(f"image dtype {img.dtype} is not floating point")
    return violations


def require_valid(sample: SegSample, space: LabelSpace) -> None:
    violations = validate_sample(sample, space)
    if violations:
        raise ValueError(f"invalid sample {sample.sample_id!r}: " + "; ".join(violations))


def build_index_sets(batch: list[AugmentedPair], space: LabelSpace) -> IndexSets:
    """Build the inlier / augmented-inlier / outlier pixel index sets of a batch.

    ``in_idx`` holds known-class pixels of the originals, ``aug_idx``
    known-class pixels of the augmented images, and ``out_idx`` outlier
    (``ood_id``) pixels of both.  Ignore pixels appear in none of the sets.
    Deterministic: indices are emitted in (pair, row-major pixel) order.
    """
    in_rows, aug_rows, out_rows = [], [], []
    for n, pair in enumerate(batch):
        for source, sample in ((0, pair.original), (1, pair.augmented)):
            lab = sample.label.reshape(-1)
            bad = ~space.is_valid(lab)
            if bad.any():
                values = sorted(np.unique(lab[bad]).tolist())
                raise ValueError(f"pair {n} ({'augmented' if source else 'original'}) has labels "
                                 f"outside the label space: {values}")
            known = np.flatnonzero(space.is_known(lab))
            ood = np.flatnonzero(lab == space.ood_id)
            dest = in_rows if source == 0 else aug_rows
            dest.append(_coords(n, known, source))
            out_rows.append(_coords(n, ood, source))
    return IndexSets(in_idx=_stack(in_rows), aug_idx=_stack(aug_rows), out_idx=_stack(out_rows))


def _coords(pair: int, flat: np.ndarray, source: int) -> np.ndarray:
    coords = np.empty((len(flat), 3), dtype=np.int64)
    coords[:, 0] = pair
    coords[:, 1] = flat
    coords[:, 2] = source
    return coords


def _stack(rows: list[np.ndarray]) -> np.ndarray:
    if not rows:
        return np.empty((0, 3), dtype=np.int64)
    return np.concatenate(rows, axis=0)
