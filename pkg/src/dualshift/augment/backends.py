"""Semantic-to-image generator seam.

A real diffusion generator plugs in behind :class:`GeneratorBackend`; the
repo ships a synthetic backend that renders label maps with the procedural
texture engine, restyles them per the prompt's weather/time words, and can
simulate generation failures (the outlier region blending into its
surroundings) at a configurable rate for filter testing.
"""

from __future__ import annotations

from abc import ABC, abstractmethod

import numpy as np
from scipy import ndimage

from ..core import LabelSpace, SegSample
from ..rendering import RenderParams, apply_covariate_shift, render_base_image
from .prompts import parse_prompt


class GeneratorBackend(ABC):
    """Maps (augmented label map, text prompt, seed) to an image."""

    name: str = "abstract"

    @abstractmethod
    def generate(self, y_aug: np.ndarray, prompt: str, seed: int) -> np.ndarray:
        """Return an image (3, H, W) in [0, 1] conditioned on the label map."""


class SyntheticBackend(GeneratorBackend):
    """Deterministic stand-in for a diffusion generator.

    Known classes render as their base textures, outlier regions as
    out-of-palette textures, and the prompt's weather/time words key a
    covariate restyling.  With probability ``failure_rate`` the outlier
    region is instead filled with the texture of its nearest surrounding
    class, imitating a generator that ignored the pasted mask.
    """

    name = "synthetic"

    def __init__(self, space: LabelSpace, params: RenderParams | None = None,
                 failure_rate: float = 0.0):
        if not (0.0 <= failure_rate <= 1.0):
            raise ValueError("failure_rate must be in [0, 1]")
        self.space = space
        self.params = params or RenderParams()
        self.failure_rate = failure_rate

    def generate(self, y_aug: np.ndarray, prompt: str, seed: int) -> np.ndarray:
        weather, time, ood_name = parse_prompt(prompt)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(0x5EED, seed)))
        ood_mask = y_aug == self.space.ood_id
        fail = ood_mask.any() and rng.random() < self.failure_rate
        label = y_aug
        regions = None
        if fail:
            label = blend_labels(y_aug, self.space)
        elif ood_mask.any():
            regions = [(ood_mask, ood_name or "unknown object")]
        img = render_base_image(label, self.space, self.params, rng, ood_regions=regions)
        if fail:
            # soften the seam so the failure is a plausible generation, not a hard edge
            edge = ood_mask & ~ndimage.binary_erosion(ood_mask, iterations=1)
            blur = ndimage.uniform_filter(img, size=(1, 3, 3))
            img[:, edge] = blur[:, edge]
        return apply_covariate_shift(img, weather, time, self.params, rng)


def blend_labels(y_aug: np.ndarray, space: LabelSpace) -> np.ndarray:
    """Replace outlier pixels with the label of the nearest non-outlier pixel."""
    ood = y_aug == space.ood_id
    if not ood.any():
        return y_aug
    _, (ir, ic) = ndimage.distance_transform_edt(ood, return_indices=True)
    filled = np.array(y_aug, copy=True)
    filled[ood] = y_aug[ir[ood], ic[ood]]
    return filled


_REGISTRY: dict[str, type] = {SyntheticBackend.name: SyntheticBackend}


def register_backend(cls: type) -> None:
    _REGISTRY[cls.name] = cls


def resolve_backend(backend, space: LabelSpace, params: RenderParams | None = None,
                    failure_rate: float = 0.0) -> GeneratorBackend:
    if isinstance(backend, GeneratorBackend):
        return backend
    if backend not in _REGISTRY:
        raise KeyError(f"unknown generator backend {backend!r}; "
                       f"registered: {sorted(_REGISTRY)}")
    return _REGISTRY[backend](space, params, failure_rate=failure_rate)


def generate(y_aug: np.ndarray, prompt: str, backend: GeneratorBackend,
             seed: int, space: LabelSpace) -> SegSample:
    """Run the backend and wrap the result as a sample carrying ``y_aug``."""
    image = backend.generate(y_aug, prompt, seed)
    return SegSample(image=image, label=np.array(y_aug, copy=True))
