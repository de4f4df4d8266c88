"""Toy multi-shift benchmark synthesis and the on-disk dataset format.

A dataset directory holds 8-bit PNG rasters plus a JSON manifest::

    <root>/manifest.json
    <root>/images/<split>/<id>.png   RGB, lossless
    <root>/labels/<split>/<id>.png   single channel: class ids, 254 = outlier,
                                     255 = ignore

Splits: ``train`` (source domain, clear/day), ``train_aug`` (generated
counterparts of train), and per regime ``{val,test}_{in,cov,sem,joint}``:
in-domain, covariate-shifted (same labels as ``*_in``), outlier objects
pasted (clear/day), and both shifts jointly.  See FORMAT.md for the byte
layout contract.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .augment.masks import paste_ood_mask, random_ood_object
from .augment.pipeline import AugmentConfig, AugmentationOutcome, augment_split, derive_rng
from .core import AugmentedPair, LabelSpace, SegSample, validate_sample
from .rendering import TIMES, WEATHERS, RenderParams, render_image

FORMAT_VERSION = 1
SUPPORTED_VERSIONS = (1,)

REGIMES = ("in", "cov", "sem", "joint")


@dataclass(frozen=True)
class ToyWorldConfig:
    num_classes: int = 6
    image_size: tuple[int, int] = (64, 64)
    texture_seed: int = 7
    pixel_noise: float = 0.03
    pattern_amp: float = 0.10
    weather_strength: float = 0.9
    time_strength: float = 0.85
    ood_shape_families: tuple[str, ...] = ("blob", "polygon", "silhouette")
    ood_pixel_fraction: float = 0.06
    train_size: int = 48
    val_size: int = 16
    test_size: int = 16
    augment_copies: int = 3  # generated counterparts per training image
    label_noise_rate: float = 0.0
    ignore_boundary: bool = True

    def __post_init__(self):
        if min(self.train_size, self.val_size, self.test_size) < 1:
            raise ValueError("split sizes must be >= 1")
        if self.pixel_noise < 0 or self.weather_strength < 0 or self.time_strength < 0:
            raise ValueError("strengths must be non-negative")

    @property
    def label_space(self) -> LabelSpace:
        return LabelSpace(num_known_classes=self.num_classes)

    @property
    def render_params(self) -> RenderParams:
        return RenderParams(
            num_classes=self.num_classes,
            texture_seed=self.texture_seed,
            pixel_noise=self.pixel_noise,
            pattern_amp=self.pattern_amp,
            weather_strength={w: self.weather_strength for w in WEATHERS},
            time_strength={t: self.time_strength for t in TIMES},
        )


def build_scene(cfg: ToyWorldConfig, rng: np.random.Generator) -> np.ndarray:
    """Layered street scene: sky over road, buildings and vegetation at the
    horizon, cars and pedestrians on the road, optional void boundary lines."""
    H, W = cfg.image_size
    space = cfg.label_space
    label = np.zeros((H, W), dtype=np.int64)  # road
    horizon = int(rng.uniform(0.30, 0.50) * H)
    label[:horizon] = 1 % cfg.num_classes  # sky

    def put_rect(cls, y0, y1, x0, x1):
        label[max(0, y0):min(H, y1), max(0, x0):min(W, x1)] = cls % cfg.num_classes

    for _ in range(int(rng.integers(1, 4))):  # buildings
        w = int(rng.integers(W // 8, W // 3))
        x0 = int(rng.integers(0, W - w))
        h = int(rng.integers(H // 6, max(H // 6 + 1, horizon)))
        put_rect(2, horizon - h, horizon, x0, x0 + w)
    yy, xx = np.mgrid[0:H, 0:W]
    for _ in range(int(rng.integers(1, 4))):  # vegetation blobs
        cx = int(rng.integers(0, W))
        cy = horizon + int(rng.integers(-H // 12, max(1, H // 10)))
        r = int(rng.integers(max(2, H // 16), max(3, H // 7)))
        label[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 5 % cfg.num_classes
    for _ in range(int(rng.integers(1, 4))):  # cars
        w = int(rng.integers(W // 10, W // 5))
        h = max(2, w // 2)
        if horizon + 2 >= H - h:
            continue
        y0 = int(rng.integers(horizon + 2, H - h))
        put_rect(3, y0, y0 + h, int(rng.integers(0, W - w)), int(rng.integers(0, W - w)) + w)
    for _ in range(int(rng.integers(0, 3))):  # pedestrians
        h = int(rng.integers(H // 8, H // 4))
        w = max(2, h // 4)
        if horizon >= H - h:
            continue
        y0 = int(rng.integers(horizon, H - h))
        put_rect(4, y0, y0 + h, int(rng.integers(0, W - w)), int(rng.integers(0, W - w)) + w)

    if cfg.ignore_boundary:
        edge = np.zeros((H, W), dtype=bool)
        edge[1:] |= label[1:] != label[:-1]
        edge[:, 1:] |= label[:, 1:] != label[:, :-1]
        label[edge] = space.ignore_id
    return label


def _scene_with_objects(cfg: ToyWorldConfig, seed: int, index: int):
    space = cfg.label_space
    scene = build_scene(cfg, derive_rng(seed, 1, index))
    obj_rng = derive_rng(seed, 2, index)
    H, W = cfg.image_size
    obj = random_ood_object(obj_rng, (H, W), cfg.ood_pixel_fraction * H * W,
                            families=cfg.ood_shape_families,
                            anchor_rows=(int(0.45 * H), H))
    pasted = paste_ood_mask(scene, obj, space)
    return scene, pasted, obj


def _weather_time(rng: np.random.Generator) -> tuple[str, str]:
    while True:
        weather = str(rng.choice(WEATHERS))
        time = str(rng.choice(TIMES))
        if not (weather == "clear" and time == "day"):
            return weather, time


@dataclass
class ToyDataset:
    """In-memory benchmark: per-split samples plus the augmented training pairs."""

    config: ToyWorldConfig
    seed: int
    splits: dict[str, list[SegSample]] = field(default_factory=dict)
    pairs: list[AugmentedPair] = field(default_factory=list)
    pair_records: list[dict] = field(default_factory=list)
    corruption_masks: list[np.ndarray] = field(default_factory=list)

    @property
    def label_space(self) -> LabelSpace:
        return self.config.label_space


def synthesize_splits(cfg: ToyWorldConfig, seed: int,
                      aug_cfg: AugmentConfig | None = None) -> ToyDataset:
    """Build the full toy benchmark in memory.

    Training images are source-domain only (clear/day).  The evaluation
    regimes reuse one scene per index: ``*_cov`` shares the label map of
    ``*_in``, ``*_joint`` shares the pasted label map of ``*_sem``.
    """
    space = cfg.label_space
    params = cfg.render_params
    ds = ToyDataset(config=cfg, seed=seed)

    train = []
    for i in range(cfg.train_size):
        label = build_scene(cfg, derive_rng(seed, 0, i))
        img = render_image(label, space, params, derive_rng(seed, 0, i, 1))
        train.append(SegSample(img, label, sample_id=f"{i:05d}"))
    ds.splits["train"] = train

    for part, size, tag in (("val", cfg.val_size, 10), ("test", cfg.test_size, 20)):
        ins, covs, sems, joints = [], [], [], []
        for i in range(size):
            scene, pasted, obj = _scene_with_objects(cfg, seed, tag * 1000 + i)
            sid = f"{i:05d}"
            style_rng = derive_rng(seed, tag, i, 0)
            weather, time = _weather_time(style_rng)
            regions = [(pasted == space.ood_id, obj.class_name)]
            ins.append(SegSample(render_image(scene, space, params,
                                              derive_rng(seed, tag, i, 1)),
                                 scene, sample_id=sid))
            covs.append(SegSample(render_image(scene, space, params,
                                               derive_rng(seed, tag, i, 2),
                                               weather=weather, time=time),
                                  scene, sample_id=sid))
            sems.append(SegSample(render_image(pasted, space, params,
                                               derive_rng(seed, tag, i, 3),
                                               ood_regions=regions),
                                  pasted, sample_id=sid))
            joints.append(SegSample(render_image(pasted, space, params,
                                                 derive_rng(seed, tag, i, 4),
                                                 weather=weather, time=time,
                                                 ood_regions=regions),
                                    pasted, sample_id=sid))
        ds.splits[f"{part}_in"] = ins
        ds.splits[f"{part}_cov"] = covs
        ds.splits[f"{part}_sem"] = sems
        ds.splits[f"{part}_joint"] = joints

    if aug_cfg is not None:
        for copy in range(max(1, cfg.augment_copies)):
            outcomes = augment_split(train, space, aug_cfg, seed, render_params=params,
                                     index_offset=copy * cfg.train_size)
            _attach_pairs(ds, outcomes, cfg, seed, copy)
    return ds


def _attach_pairs(ds: ToyDataset, outcomes: list[AugmentationOutcome],
                  cfg: ToyWorldConfig, seed: int, copy: int) -> None:
    space = cfg.label_space
    for i, outcome in enumerate(outcomes):
        pair = outcome.pair
        aug_id = f"{pair.original.sample_id}_{copy}"
        mask = np.zeros(pair.augmented.label.shape, dtype=bool)
        if cfg.label_noise_rate > 0 and outcome.kept:
            pair, mask = corrupt_pair(pair, cfg.label_noise_rate,
                                      derive_rng(seed, 40, copy * cfg.train_size + i), space)
        pair = AugmentedPair(pair.original,
                             SegSample(pair.augmented.image, pair.augmented.label,
                                       sample_id=aug_id),
                             pair.pair_valid)
        ds.pairs.append(pair)
        ds.corruption_masks.append(mask)
        ds.pair_records.append({
            "id": aug_id,
            "original_id": pair.original.sample_id,
            "kept": bool(outcome.kept),
            "attempts": int(outcome.attempts),
            "prompt": dataclasses.asdict(outcome.prompt),
            "verdict": outcome.verdict.to_manifest(),
            "corrupted_pixels": int(mask.sum()),
        })


def kept_pairs(ds: ToyDataset) -> list[AugmentedPair]:
    return [p for p, r in zip(ds.pairs, ds.pair_records) if r["kept"]]


def corrupt_pair(pair: AugmentedPair, rate: float, rng: np.random.Generator,
                 space: LabelSpace) -> tuple[AugmentedPair, np.ndarray]:
    """Flip blob-shaped patches of the augmented label map to wrong known classes.

    Exactly ``round(rate * |eligible|)`` eligible (known-class) pixels are
    corrupted, emulating generator/label mismatch noise.  Returns the new
    pair and the corruption mask; ``pair_valid`` is recomputed, so corrupted
    locations drop out of the same-position pairing automatically.
    """
    label = np.array(pair.augmented.label, copy=True)
    eligible = space.is_known(label)
    target = int(round(rate * int(eligible.sum())))
    corrupted = np.zeros(label.shape, dtype=bool)
    H, W = label.shape
    yy, xx = np.mgrid[0:H, 0:W]
    guard = 0
    while corrupted.sum() < target and guard < 10_000:
        guard += 1
        cy, cx = int(rng.integers(0, H)), int(rng.integers(0, W))
        r = int(rng.integers(2, max(3, H // 8)))
        blob = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r) & eligible & ~corrupted
        if not blob.any():
            continue
        overshoot = int(corrupted.sum() + blob.sum()) - target
        if overshoot > 0:  # trim deterministically by flat index
            idx = np.flatnonzero(blob.reshape(-1))[:blob.sum() - overshoot]
            blob = np.zeros_like(blob)
            blob.reshape(-1)[idx] = True
        wrong = (label + 1 + rng.integers(0, space.num_known_classes - 1,
                                          size=int(blob.sum()))) % space.num_known_classes
        label[blob] = wrong
        corrupted |= blob
    new_aug = SegSample(pair.augmented.image, label, sample_id=pair.augmented.sample_id)
    pair_valid = (space.is_known(pair.original.label) & space.is_known(label)
                  & (pair.original.label == label))
    return AugmentedPair(pair.original, new_aug, pair_valid), corrupted


# ---------------------------------------------------------------------------
# on-disk format


def _save_png(path: Path, array: np.ndarray, rgb: bool) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if rgb:
        data = np.clip(np.round(array * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(data, mode="RGB").save(path, format="PNG", optimize=False)
    else:
        Image.fromarray(array.astype(np.uint8), mode="L").save(path, format="PNG",
                                                               optimize=False)


def _load_png(path: Path, rgb: bool) -> np.ndarray:
    if not path.exists():
        raise FileNotFoundError(path)
    with Image.open(path) as im:
        arr = np.asarray(im)
    if rgb:
        return arr.astype(np.float64).transpose(2, 0, 1) / 255.0
    return arr.astype(np.int64)


def save_dataset(ds: ToyDataset, root: str | Path) -> dict:
    """Write the dataset directory; returns the manifest dict."""
    root = Path(root)
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": ds.seed,
        "label_space": {
            "num_known_classes": ds.label_space.num_known_classes,
            "ood_id": ds.label_space.ood_id,
            "ignore_id": ds.label_space.ignore_id,
        },
        "config": dataclasses.asdict(ds.config),
        "splits": {},
        "pairs": ds.pair_records,
    }
    for split, samples in ds.splits.items():
        entries = []
        for s in samples:
            image_rel = f"images/{split}/{s.sample_id}.png"
            label_rel = f"labels/{split}/{s.sample_id}.png"
            _save_png(root / image_rel, s.image, rgb=True)
            _save_png(root / label_rel, s.label, rgb=False)
            entries.append({"id": s.sample_id, "image": image_rel, "label": label_rel})
        manifest["splits"][split] = entries
    if ds.pairs:
        entries = []
        for pair in ds.pairs:
            sid = pair.augmented.sample_id
            image_rel = f"images/train_aug/{sid}.png"
            label_rel = f"labels/train_aug/{sid}.png"
            _save_png(root / image_rel, pair.augmented.image, rgb=True)
            _save_png(root / label_rel, pair.augmented.label, rgb=False)
            entries.append({"id": sid, "image": image_rel, "label": label_rel})
        manifest["splits"]["train_aug"] = entries
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def synthesize_toy_dataset(cfg: ToyWorldConfig, seed: int, out_dir: str | Path,
                           aug_cfg: AugmentConfig | None = None) -> dict:
    """Synthesize and persist the toy benchmark; returns the manifest."""
    return save_dataset(synthesize_splits(cfg, seed, aug_cfg=aug_cfg), out_dir)


@dataclass
class LoadedDataset:
    root: Path
    manifest: dict
    label_space: LabelSpace
    splits: dict[str, list[SegSample]]
    pairs: list[AugmentedPair]

    def samples(self, split: str) -> list[SegSample]:
        if split not in self.splits:
            raise KeyError(f"split {split!r} not in dataset; has {sorted(self.splits)}")
        return self.splits[split]


def load_dataset(root: str | Path, validate: bool = True) -> LoadedDataset:
    """Load a dataset directory, validating structure and every sample."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    version = manifest.get("format_version")
    if version not in SUPPORTED_VERSIONS:
        raise ValueError(f"unsupported dataset format version {version!r}; "
                         f"supported: {list(SUPPORTED_VERSIONS)}")
    ls = manifest["label_space"]
    space = LabelSpace(num_known_classes=ls["num_known_classes"],
                       ood_id=ls["ood_id"], ignore_id=ls["ignore_id"])
    splits: dict[str, list[SegSample]] = {}
    for split, entries in manifest["splits"].items():
        samples = []
        for entry in entries:
            sid = entry["id"]
            try:
                image = _load_png(root / entry["image"], rgb=True)
                label = _load_png(root / entry["label"], rgb=False)
            except FileNotFoundError as exc:
                raise FileNotFoundError(
                    f"sample {sid!r} of split {split!r}: missing file {exc}") from exc
            sample = SegSample(image, label, sample_id=sid)
            if validate:
                violations = validate_sample(sample, space)
                if violations:
                    raise ValueError(f"sample {sid!r} of split {split!r} invalid: "
                                     + "; ".join(violations))
            samples.append(sample)
        splits[split] = samples

    pairs = []
    if "train_aug" in splits:
        by_id = {s.sample_id: s for s in splits.get("train", [])}
        records = {rec["id"]: rec for rec in manifest.get("pairs", [])}
        for aug in splits["train_aug"]:
            rec = records.get(aug.sample_id)
            if rec is None or not rec["kept"] or rec["original_id"] not in by_id:
                continue
            orig = by_id[rec["original_id"]]
            valid = (space.is_known(orig.label) & space.is_known(aug.label)
                     & (orig.label == aug.label))
            pairs.append(AugmentedPair(orig, aug, valid))
    return LoadedDataset(root=root, manifest=manifest, label_space=space,
                         splits=splits, pairs=pairs)
