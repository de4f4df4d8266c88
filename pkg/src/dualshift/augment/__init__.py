"""Coherent generative-style augmentation with auto-filtering, plus the
rule-based augmentation baseline."""

from .backends import GeneratorBackend, SyntheticBackend, generate, resolve_backend
from .filtering import (
    ContentOracle,
    FilterVerdict,
    LabelPrototypeScorer,
    PaletteDistanceScorer,
    PerfectOracle,
    SegmentationOracle,
    UncertaintyScorer,
    auto_filter,
)
from .masks import OodObjectMask, bounding_box, paste_ood_mask, random_ood_object
from .pipeline import (
    AugmentConfig,
    AugmentationOutcome,
    augment_sample,
    augment_split,
    make_oracle,
)
from .prompts import PromptSpec, city_list, parse_prompt, random_prompt, render_prompt
from .rules import DEFAULT_PROBS, rule_augment
