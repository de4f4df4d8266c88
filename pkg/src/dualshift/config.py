"""Flat run configuration shared by every CLI subcommand.

One namespace of scalar keys covering the toy world, the augmentation
pipeline, both training stages, and evaluation.  Every key can come from a
JSON/YAML config file and be overridden on the command line; unknown keys
are rejected so typos cannot silently change a run.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .augment.pipeline import AugmentConfig
from .datakit import ToyWorldConfig
from .losses import LossWeights, Margins
from .trainer import TrainConfig


@dataclass
class RunConfig:
    # toy world
    num_classes: int = 6
    image_size: int = 64
    texture_seed: int = 7
    pixel_noise: float = 0.03
    pattern_amp: float = 0.10
    weather_strength: float = 0.9
    time_strength: float = 0.85
    ood_pixel_fraction: float = 0.06
    train_size: int = 48
    val_size: int = 16
    test_size: int = 16
    augment_copies: int = 3
    label_noise_rate: float = 0.0
    ignore_boundary: bool = True
    # augmentation + filtering
    failure_rate: float = 0.0
    max_retries: int = 3
    iou_threshold: float = 0.7
    unc_threshold_pct: float = 10.0
    oracle: str = "content"
    oracle_boundary_noise: float = 0.5
    backend: str = "synthetic"
    # losses
    lambda1: float = 10.0
    lambda2: float = 5.0
    lambda3: float = 5.0
    beta1: float = 50.0
    beta2: float = 10.0
    selection_ratio: float = 0.8
    pair_sample_k: int = 4096
    score_sign: float = -1.0
    loss_variant: str = "relative"
    learnable_head: bool = True
    # training
    pretrain_steps: int = 250
    pretrain_lr: float = 3e-3
    stage1_steps: int = 200
    stage1_lr: float = 3e-2
    stage2_steps: int = 300
    stage2_lr: float = 3e-3
    batch_size: int = 4
    eval_every: int = 50
    model_width: int = 16
    feature_dim: int = 16
    # bookkeeping
    seed: int = 0
    dataset_dir: str = "runs/dataset"
    output_dir: str = "runs/out"

    def toy_world(self) -> ToyWorldConfig:
        return ToyWorldConfig(
            num_classes=self.num_classes,
            image_size=(self.image_size, self.image_size),
            texture_seed=self.texture_seed,
            pixel_noise=self.pixel_noise,
            pattern_amp=self.pattern_amp,
            weather_strength=self.weather_strength,
            time_strength=self.time_strength,
            ood_pixel_fraction=self.ood_pixel_fraction,
            train_size=self.train_size,
            val_size=self.val_size,
            test_size=self.test_size,
            augment_copies=self.augment_copies,
            label_noise_rate=self.label_noise_rate,
            ignore_boundary=self.ignore_boundary,
        )

    def augmentation(self) -> AugmentConfig:
        return AugmentConfig(
            ood_area_fraction=self.ood_pixel_fraction,
            max_retries=self.max_retries,
            failure_rate=self.failure_rate,
            iou_threshold=self.iou_threshold,
            unc_threshold_pct=self.unc_threshold_pct,
            oracle=self.oracle,
            oracle_boundary_noise=self.oracle_boundary_noise,
        )

    def margins(self) -> Margins:
        return Margins(self.lambda1, self.lambda2, self.lambda3)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.beta1, self.beta2)

    def stage_config(self, stage: int) -> TrainConfig:
        steps, lr = {
            0: (self.pretrain_steps, self.pretrain_lr),
            1: (self.stage1_steps, self.stage1_lr),
            2: (self.stage2_steps, self.stage2_lr),
        }[stage]
        return TrainConfig(
            stage=max(stage, 1),
            margins=self.margins(),
            weights=self.loss_weights(),
            selection_ratio=self.selection_ratio,
            pair_sample_k=self.pair_sample_k,
            learning_rate=lr,
            steps=steps,
            batch_size=self.batch_size,
            seed=self.seed,
            score_sign=self.score_sign,
            loss_variant=self.loss_variant,
            learnable_head=self.learnable_head,
            eval_every=self.eval_every,
            model_width=self.model_width,
            feature_dim=self.feature_dim,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value):
    if name not in _FIELDS:
        raise KeyError(f"unknown config key {name!r}; known keys: {sorted(_FIELDS)}")
    target = _FIELDS[name].type
    if isinstance(value, str):
        if target in ("int", int):
            return int(value)
        if target in ("float", float):
            return float(value)
        if target in ("bool", bool):
            lowered = value.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"cannot parse boolean config value {value!r} for {name}")
    return value


def load_config(path: str | Path | None = None,
                overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from defaults, an optional file, and overrides."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        text = path.read_text()
        data = yaml.safe_load(text) if path.suffix in (".yml", ".yaml") else json.loads(text)
        if not isinstance(data, dict):
            raise ValueError(f"config file {path} must hold a mapping")
    merged = {}
    for source in (data, overrides or {}):
        for key, value in source.items():
            merged[key] = _coerce(key, value)
    return RunConfig(**merged)


def print_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
