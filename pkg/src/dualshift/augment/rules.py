"""Rule-based image augmentation baseline (transformation roulette).

Each transform fires independently with its table probability; geometric
transforms move the label map jointly (nearest neighbor), photometric ones
leave it alone.  Everything is driven by one seeded generator, so a run is
reproducible from its seed.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..core import IGNORE_ID, SegSample

DEFAULT_PROBS = {
    "color_jitter": 0.5,
    "gaussian_blur": 0.5,
    "sharpness": 0.5,
    "contrast": 0.5,
    "equalize": 0.5,
    "resize": 0.5,
    "rotation": 0.5,
    "hflip": 0.75,
    "crop": 1.0,
}


def rule_augment(sample: SegSample, seed: int,
                 probabilities: dict[str, float] | None = None) -> SegSample:
    probs = dict(DEFAULT_PROBS)
    if probabilities:
        unknown = set(probabilities) - set(DEFAULT_PROBS)
        if unknown:
            raise ValueError(f"unknown augmentation ops: {sorted(unknown)}")
        probs.update(probabilities)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(0xA06, seed)))
    img = sample.image.astype(np.float64).copy()
    lab = sample.label.copy()
    H, W = lab.shape

    if rng.random() < probs["color_jitter"]:
        scale = rng.uniform(0.7, 1.3, size=3)[:, None, None]
        shift = rng.uniform(-0.08, 0.08, size=3)[:, None, None]
        img = img * scale + shift
    if rng.random() < probs["gaussian_blur"]:
        sigma = rng.uniform(0.4, 1.4)
        img = ndimage.gaussian_filter(img, sigma=(0, sigma, sigma))
    if rng.random() < probs["sharpness"]:
        amount = rng.uniform(0.3, 1.2)
        blurred = ndimage.gaussian_filter(img, sigma=(0, 1.0, 1.0))
        img = img + amount * (img - blurred)
    if rng.random() < probs["contrast"]:
        factor = rng.uniform(0.7, 1.4)
        img = (img - img.mean()) * factor + img.mean()
    if rng.random() < probs["equalize"]:
        img = _equalize(np.clip(img, 0.0, 1.0))
    img = np.clip(img, 0.0, 1.0)

    if rng.random() < probs["resize"]:
        zoom = rng.uniform(1.0, 1.3)
        img, lab = _zoom_joint(img, lab, zoom)
    if rng.random() < probs["rotation"]:
        angle = rng.uniform(-10.0, 10.0)
        img = ndimage.rotate(img, angle, axes=(1, 2), reshape=False, order=1, mode="nearest")
        lab = ndimage.rotate(lab, angle, reshape=False, order=0,
                             mode="constant", cval=IGNORE_ID)
        img = np.clip(img, 0.0, 1.0)
    if rng.random() < probs["hflip"]:
        img = img[:, :, ::-1].copy()
        lab = lab[:, ::-1].copy()
    if rng.random() < probs["crop"]:
        dh, dw = img.shape[1] - H, img.shape[2] - W
        r = int(rng.integers(0, dh + 1))
        c = int(rng.integers(0, dw + 1))
        img = img[:, r:r + H, c:c + W]
        lab = lab[r:r + H, c:c + W]
    else:
        img, lab = img[:, :H, :W], lab[:H, :W]

    return SegSample(image=np.ascontiguousarray(img), label=np.ascontiguousarray(lab),
                     sample_id=sample.sample_id)


def _zoom_joint(img: np.ndarray, lab: np.ndarray, zoom: float) -> tuple[np.ndarray, np.ndarray]:
    img = ndimage.zoom(img, (1, zoom, zoom), order=1)
    lab = ndimage.zoom(lab, (zoom, zoom), order=0)
    h = min(img.shape[1], lab.shape[0])
    w = min(img.shape[2], lab.shape[1])
    return np.clip(img[:, :h, :w], 0.0, 1.0), lab[:h, :w]


def _equalize(img: np.ndarray, bins: int = 256) -> np.ndarray:
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        chan = img[c]
        hist, edges = np.histogram(chan, bins=bins, range=(0.0, 1.0))
        cdf = hist.cumsum().astype(np.float64)
        if cdf[-1] == 0:
            out[c] = chan
            continue
        cdf /= cdf[-1]
        out[c] = np.interp(chan, edges[:-1], cdf)
    return out
