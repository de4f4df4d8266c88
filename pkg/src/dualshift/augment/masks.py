"""Procedural outlier object masks and the label-map pasting operation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw

from ..core import LabelSpace

SHAPE_FAMILIES = ("blob", "polygon", "silhouette")

# names only key the rendered texture; any vocabulary works
_CLASS_NAMES = {
    "blob": ("boulder", "hay bale", "trash bag", "mattress"),
    "polygon": ("crate", "cardboard box", "warning sign", "kite"),
    "silhouette": ("deer", "dog", "sheep", "wild boar"),
}


@dataclass(frozen=True)
class OodObjectMask:
    """A pastable outlier object: local boolean mask, class name, paste anchor."""

    mask: np.ndarray
    class_name: str
    anchor: tuple[int, int]  # top-left (row, col)

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim != 2 or not mask.any():
            raise ValueError("object mask must be 2-D with at least one true pixel")
        object.__setattr__(self, "mask", mask)

    def footprint(self, shape: tuple[int, int]) -> tuple[slice, slice]:
        r, c = self.anchor
        h, w = self.mask.shape
        if r < 0 or c < 0 or r + h > shape[0] or c + w > shape[1]:
            raise ValueError(f"object footprint {(r, c, h, w)} exceeds canvas {shape}")
        return slice(r, r + h), slice(c, c + w)

    def full_mask(self, shape: tuple[int, int]) -> np.ndarray:
        out = np.zeros(shape, dtype=bool)
        rows, cols = self.footprint(shape)
        out[rows, cols] = self.mask
        return out


def paste_ood_mask(label: np.ndarray, obj: OodObjectMask, space: LabelSpace) -> np.ndarray:
    """Overwrite the object's footprint with ``ood_id``; everything else is untouched."""
    out = np.array(label, copy=True)
    rows, cols = obj.footprint(label.shape)
    region = out[rows, cols]
    region[obj.mask] = space.ood_id
    out[rows, cols] = region
    return out


def _blob_mask(rng: np.random.Generator, radius: float) -> np.ndarray:
    size = int(np.ceil(radius * 2.6)) + 2
    yy, xx = np.mgrid[0:size, 0:size] - size / 2.0
    theta = np.arctan2(yy, xx)
    rr = np.hypot(yy, xx)
    profile = np.ones_like(theta) * radius
    for k in range(2, 5):
        profile += radius * rng.uniform(0.05, 0.18) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    return rr <= profile


def _polygon_mask(rng: np.random.Generator, radius: float) -> np.ndarray:
    size = int(np.ceil(radius * 2.8)) + 2
    n = int(rng.integers(4, 9))
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
    radii = radius * rng.uniform(0.6, 1.25, size=n)
    pts = [(size / 2 + r * np.cos(a), size / 2 + r * np.sin(a)) for a, r in zip(angles, radii)]
    canvas = Image.new("1", (size, size), 0)
    ImageDraw.Draw(canvas).polygon(pts, fill=1)
    return np.asarray(canvas, dtype=bool)


def _silhouette_mask(rng: np.random.Generator, radius: float) -> np.ndarray:
    # body + head + legs, vaguely animal-like
    size = int(np.ceil(radius * 3.0)) + 2
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = size * 0.45, size * 0.5
    body = (((xx - cx) / (1.4 * radius)) ** 2 + ((yy - cy) / (0.75 * radius)) ** 2) <= 1.0
    hx = cx + 1.25 * radius * rng.choice([-1.0, 1.0])
    head = (((xx - hx) / (0.45 * radius)) ** 2 + ((yy - (cy - 0.5 * radius)) / (0.45 * radius)) ** 2) <= 1.0
    mask = body | head
    for dx in (-0.8, 0.8):
        lx = cx + dx * radius
        leg = (np.abs(xx - lx) <= 0.18 * radius) & (yy >= cy) & (yy <= cy + 1.4 * radius)
        mask |= leg
    return mask


_BUILDERS = {"blob": _blob_mask, "polygon": _polygon_mask, "silhouette": _silhouette_mask}


def random_ood_object(rng: np.random.Generator, canvas_shape: tuple[int, int],
                      target_area: float, families: tuple[str, ...] = SHAPE_FAMILIES,
                      anchor_rows: tuple[int, int] | None = None) -> OodObjectMask:
    """Draw a procedural object with roughly ``target_area`` pixels and place it.

    The shape is generated at a probe radius, measured, and regenerated at
    the corrected radius, which keeps the mean outlier pixel fraction of a
    split close to its configured rate.  ``anchor_rows`` restricts the
    vertical placement band (e.g. to the road region).
    """
    family = str(rng.choice(list(families)))
    builder = _BUILDERS[family]
    probe_radius = max(2.0, np.sqrt(target_area / np.pi))
    state = rng.bit_generator.state
    probe = builder(rng, probe_radius)
    scale = np.sqrt(target_area / max(probe.sum(), 1))
    rng.bit_generator.state = state  # same shape, corrected size
    mask = builder(rng, probe_radius * scale)
    mask = _trim(mask)
    h, w = mask.shape
    H, W = canvas_shape
    if h >= H or w >= W:
        keep_h, keep_w = min(h, H - 2), min(w, W - 2)
        mask = mask[:keep_h, :keep_w]
        if not mask.any():
            mask = np.ones((2, 2), dtype=bool)
        h, w = mask.shape
    lo = 0 if anchor_rows is None else max(0, min(anchor_rows[0], H - h))
    hi = H - h if anchor_rows is None else max(lo, min(anchor_rows[1] - h, H - h))
    r = int(rng.integers(lo, hi + 1))
    c = int(rng.integers(0, W - w + 1))
    name = str(rng.choice(list(_CLASS_NAMES[family])))
    return OodObjectMask(mask=mask, class_name=name, anchor=(r, c))


def _trim(mask: np.ndarray) -> np.ndarray:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if len(rows) == 0:
        return np.ones((2, 2), dtype=bool)
    return mask[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]


def bounding_box(mask: np.ndarray, pad: int = 2) -> tuple[int, int, int, int]:
    """(row0, col0, row1, col1) box around a full-frame mask, padded and clipped."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if len(rows) == 0:
        raise ValueError("empty mask has no bounding box")
    H, W = mask.shape
    return (max(0, rows[0] - pad), max(0, cols[0] - pad),
            min(H, rows[-1] + 1 + pad), min(W, cols[-1] + 1 + pad))
