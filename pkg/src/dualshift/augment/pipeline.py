"""End-to-end coherent augmentation: paste an outlier object into the label
map, render the prompt, generate the image, filter, and (on keep) revise the
outlier mask to the oracle segmentation.

Each sample derives its own random stream from (run seed, sample index), so
any worker split of a dataset job produces identical output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import AugmentedPair, LabelSpace, SegSample
from ..rendering import RenderParams
from .backends import GeneratorBackend, generate, resolve_backend
from .filtering import (
    ContentOracle,
    FilterVerdict,
    LabelPrototypeScorer,
    SegmentationOracle,
    UncertaintyScorer,
    auto_filter,
)
from .masks import OodObjectMask, bounding_box, paste_ood_mask, random_ood_object
from .prompts import PromptSpec, city_list, random_prompt, render_prompt


@dataclass(frozen=True)
class AugmentConfig:
    ood_area_fraction: float = 0.06
    max_retries: int = 3
    failure_rate: float = 0.0
    iou_threshold: float = 0.7
    unc_threshold_pct: float = 10.0
    oracle: str = "content"  # or "perfect"
    oracle_boundary_noise: float = 0.5
    anchor_band: tuple[float, float] = (0.45, 1.0)  # vertical placement, fraction of H


@dataclass
class AugmentationOutcome:
    pair: AugmentedPair
    prompt: PromptSpec
    verdict: FilterVerdict
    attempts: int

    @property
    def kept(self) -> bool:
        return self.verdict.keep


def derive_rng(run_seed: int, *branch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=(run_seed, *branch)))


def make_oracle(cfg: AugmentConfig, space: LabelSpace, seed: int = 0) -> SegmentationOracle:
    from .filtering import PerfectOracle

    if cfg.oracle == "content":
        return ContentOracle()
    if cfg.oracle == "perfect":
        return PerfectOracle(space, cfg.oracle_boundary_noise, seed=seed)
    raise ValueError(f"unknown oracle {cfg.oracle!r}; expected 'content' or 'perfect'")


def augment_sample(sample: SegSample, space: LabelSpace, cfg: AugmentConfig,
                   run_seed: int, index: int,
                   backend: GeneratorBackend | str = "synthetic",
                   oracle: SegmentationOracle | None = None,
                   scorer: UncertaintyScorer | None = None,
                   render_params: RenderParams | None = None) -> AugmentationOutcome:
    """Produce the augmented counterpart of one training sample.

    Failed generations are discarded and regenerated up to ``max_retries``
    times; the last attempt's verdict is reported either way.
    """
    params = render_params or RenderParams(num_classes=space.num_known_classes)
    backend = resolve_backend(backend, space, params, failure_rate=cfg.failure_rate)
    if oracle is None:
        oracle = make_oracle(cfg, space, seed=int(derive_rng(run_seed, index, 3).integers(2 ** 31)))
    scorer = scorer or LabelPrototypeScorer(space)
    H, W = sample.label.shape
    target_area = cfg.ood_area_fraction * H * W
    cities = city_list()

    outcome = None
    for attempt in range(cfg.max_retries + 1):
        rng = derive_rng(run_seed, index, attempt)
        obj = random_ood_object(rng, (H, W), target_area,
                                anchor_rows=(int(cfg.anchor_band[0] * H),
                                             int(cfg.anchor_band[1] * H)))
        y_aug = paste_ood_mask(sample.label, obj, space)
        spec = random_prompt(rng, covariate=True, ood_class=obj.class_name, cities=cities)
        gen_seed = int(rng.integers(2 ** 31))
        augmented = generate(y_aug, render_prompt(spec), backend, gen_seed, space)
        bbox = bounding_box(obj.full_mask((H, W)))
        verdict = auto_filter(augmented, bbox, oracle, scorer,
                              iou_threshold=cfg.iou_threshold,
                              unc_threshold_pct=cfg.unc_threshold_pct, space=space)
        if verdict.keep and verdict.revised_mask is not None:
            y_rev = np.array(sample.label, copy=True)
            y_rev[verdict.revised_mask] = space.ood_id
            augmented = SegSample(image=augmented.image, label=y_rev,
                                  sample_id=augmented.sample_id)
        pair_valid = (space.is_known(sample.label) & space.is_known(augmented.label)
                      & (sample.label == augmented.label))
        pair = AugmentedPair(original=sample,
                             augmented=SegSample(augmented.image, augmented.label,
                                                 sample_id=sample.sample_id),
                             pair_valid=pair_valid)
        outcome = AugmentationOutcome(pair=pair, prompt=spec, verdict=verdict,
                                      attempts=attempt + 1)
        if verdict.keep:
            break
    return outcome


def augment_split(samples: list[SegSample], space: LabelSpace, cfg: AugmentConfig,
                  run_seed: int, backend: GeneratorBackend | str = "synthetic",
                  render_params: RenderParams | None = None,
                  index_offset: int = 0) -> list[AugmentationOutcome]:
    return [
        augment_sample(s, space, cfg, run_seed, index_offset + i, backend=backend,
                       render_params=render_params)
        for i, s in enumerate(samples)
    ]
