"""Two-stage noise-aware training over the toy segmentation model.

Stage 1 freezes the whole network and recalibrates only the uncertainty
projection with the relative contrastive loss.  Stage 2 fine-tunes the
decoder and classifier (the encoder stays frozen, mirroring partial
fine-tuning of a large backbone) under the combined objective: contrastive
term, standard cross-entropy on originals, and selective cross-entropy on
the generated augmentations with online per-batch pixel selection.

Ablation switches live in the config: ``learnable_head=False`` ties the
uncertainty function to the live classifier weights (stage 1 becomes a
no-op), ``loss_variant="absolute"`` swaps the relative loss for fixed-target
hinges, and ``selection_ratio=1.0`` disables sample selection.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import AugmentedPair, IndexSets, LabelSpace, SegSample, build_index_sets
from .evaluation import evaluate_regime
from .heads import HeadMode, UncertaintyHead, init_from_class_head, logsumexp, softmax
from .losses import (
    LossWeights,
    Margins,
    PairSampler,
    absolute_contrastive_terms,
    build_selection_mask,
    relative_contrastive_terms,
    total_loss,
)
from .model import ToySegModel, batch_images, cross_entropy_grad, pixel_cross_entropy
from .nn import Adam, Param


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    margins: Margins = field(default_factory=Margins.pixel_defaults)
    weights: LossWeights = field(default_factory=LossWeights)
    selection_ratio: float = 0.8
    pair_sample_k: int = 4096
    learning_rate: float = 1e-3
    steps: int = 300
    batch_size: int = 4
    seed: int = 0
    score_sign: float = -1.0
    loss_variant: str = "relative"      # or "absolute"
    learnable_head: bool = True
    eval_every: int = 50
    model_width: int = 16
    feature_dim: int = 16
    absolute_center: float | None = None  # auto from the first batch when None

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.loss_variant not in ("relative", "absolute"):
            raise ValueError(f"unknown loss_variant {self.loss_variant!r}")
        if not (0.0 < self.selection_ratio <= 1.0):
            raise ValueError("selection_ratio must be in (0, 1]")

    def hash(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    model_state: dict
    head_weights: np.ndarray
    head_mode: str
    step: int
    config_hash: str
    metrics: dict = field(default_factory=dict)
    curve: list = field(default_factory=list)

    def head(self) -> UncertaintyHead:
        return UncertaintyHead(self.head_weights.copy(), HeadMode(self.head_mode))

    def build_model(self, num_classes: int, cfg: TrainConfig) -> ToySegModel:
        model = ToySegModel(num_classes, width=cfg.model_width,
                            feature_dim=cfg.feature_dim, seed=cfg.seed)
        model.load_state(self.model_state)
        return model


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Single-archive checkpoint: JSON manifest plus one .npy per tensor.

    Entries are stored uncompressed with a fixed timestamp, so saving the
    same checkpoint twice is byte-identical.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"model/{k}": v for k, v in ckpt.model_state.items()}
    arrays["head/weights"] = ckpt.head_weights
    manifest = {
        "format_version": 1,
        "step": int(ckpt.step),
        "config_hash": ckpt.config_hash,
        "head_mode": ckpt.head_mode,
        "metrics": ckpt.metrics,
        "curve": ckpt.curve,
        "arrays": sorted(arrays),
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        def write(name: str, data: bytes):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, data)

        write("manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode())
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]),
                                      version=(1, 0))
            write(f"arrays/{name}.npy", buf.getvalue())


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format_version") != 1:
            raise ValueError(f"unsupported checkpoint version {manifest.get('format_version')!r}")
        arrays = {}
        for name in manifest["arrays"]:
            arrays[name] = np.lib.format.read_array(io.BytesIO(zf.read(f"arrays/{name}.npy")))
    model_state = {k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")}
    return Checkpoint(model_state=model_state, head_weights=arrays["head/weights"],
                      head_mode=manifest["head_mode"], step=manifest["step"],
                      config_hash=manifest["config_hash"], metrics=manifest["metrics"],
                      curve=manifest["curve"])


def _derive_rng(seed: int, *branch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=(seed, *branch)))


def sample_batches(samples: list[SegSample], batch_size: int, steps: int, seed: int):
    """Deterministic shuffled cycling over a sample list, one batch per step."""
    order = []
    epoch = 0
    for _ in range(steps):
        if len(order) < batch_size:
            perm = _derive_rng(seed, 101, epoch).permutation(len(samples))
            order.extend(perm.tolist())
            epoch += 1
        take, order = order[:batch_size], order[batch_size:]
        yield [samples[i] for i in take]


def pair_batches(pairs: list[AugmentedPair], batch_size: int, steps: int, seed: int):
    order = []
    epoch = 0
    for _ in range(steps):
        if len(order) < batch_size:
            perm = _derive_rng(seed, 202, epoch).permutation(len(pairs))
            order.extend(perm.tolist())
            epoch += 1
        take, order = order[:batch_size], order[batch_size:]
        yield [pairs[i] for i in take]


# ---------------------------------------------------------------------------
# shared pieces


def _gather_features(feats: np.ndarray, idx: np.ndarray, batch: int) -> np.ndarray:
    # feats is the stacked (2B, F, H, W) tensor: originals then augmented
    nb, F = feats.shape[0], feats.shape[1]
    flat = feats.reshape(nb, F, -1)
    rows = idx[:, 0] + batch * idx[:, 2]
    return flat[rows, :, idx[:, 1]]


def _position_pairs(batch: list[AugmentedPair], sets: IndexSets, hw: int) -> np.ndarray:
    """Rows (aug row, in row) of same-location valid pairs, indexing into the
    gathered aug/in score vectors."""
    keys_in = sets.in_idx[:, 0] * hw + sets.in_idx[:, 1]
    keys_aug = sets.aug_idx[:, 0] * hw + sets.aug_idx[:, 1]
    chunks = []
    for n, pair in enumerate(batch):
        flat = np.flatnonzero(pair.pair_valid.reshape(-1))
        if not len(flat):
            continue
        keys = n * hw + flat
        ai = np.searchsorted(keys_aug, keys)
        ii = np.searchsorted(keys_in, keys)
        ok = ((ai < len(keys_aug)) & (ii < len(keys_in)))
        ok &= keys_aug[np.minimum(ai, len(keys_aug) - 1)] == keys
        ok &= keys_in[np.minimum(ii, len(keys_in) - 1)] == keys
        chunks.append(np.stack([ai[ok], ii[ok]], axis=1))
    if not chunks:
        return np.empty((0, 2), dtype=np.int64)
    return np.concatenate(chunks)


class _UncState:
    """Per-run state for the uncertainty objective (sampler + absolute center)."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.sampler = PairSampler(cfg.pair_sample_k,
                                   seed=int(_derive_rng(cfg.seed, 77).integers(2 ** 31)))
        self.center = cfg.absolute_center

    def loss_and_grads(self, s_in, s_aug, s_out, pairs):
        if self.cfg.loss_variant == "relative":
            return relative_contrastive_terms(s_in, s_aug, s_out, pairs,
                                              self.cfg.margins, self.sampler)
        if self.center is None:
            # fixed target from the first batch's inlier scores
            self.center = float(np.mean(np.concatenate([s_in, s_aug])))
        return absolute_contrastive_terms(s_in, s_aug, s_out, self.center,
                                          self.cfg.margins)


def _uncertainty_step(feats: np.ndarray, batch: list[AugmentedPair], space: LabelSpace,
                      weights: np.ndarray, cfg: TrainConfig, unc: _UncState,
                      want_feature_grads: bool):
    """Contrastive objective on the stacked features; gradients for the
    projection and (optionally) the involved feature rows."""
    B = len(batch)
    hw = batch[0].original.label.size
    sets = build_index_sets(batch, space)
    gathered = {
        "in": _gather_features(feats, sets.in_idx, B),
        "aug": _gather_features(feats, sets.aug_idx, B),
        "out": _gather_features(feats, sets.out_idx, B),
    }
    scores = {}
    caches = {}
    for name, f in gathered.items():
        if len(f):
            z = f @ weights
            caches[name] = z
            scores[name] = cfg.score_sign * logsumexp(z, axis=1)
        else:
            scores[name] = np.zeros(0)
    pairs = _position_pairs(batch, sets, hw)
    result = unc.loss_and_grads(scores["in"], scores["aug"], scores["out"], pairs)

    d_weights = np.zeros_like(weights)
    d_feats = np.zeros_like(feats) if want_feature_grads else None
    grads = {"in": result.grad_in, "aug": result.grad_aug, "out": result.grad_out}
    for name, idx in (("in", sets.in_idx), ("aug", sets.aug_idx), ("out", sets.out_idx)):
        if not len(grads[name]):
            continue
        du = cfg.score_sign * grads[name]
        zbar = softmax(caches[name], axis=1) * du[:, None]
        d_weights += gathered[name].T @ zbar
        if want_feature_grads:
            rows = idx[:, 0] + B * idx[:, 2]
            flat = d_feats.reshape(feats.shape[0], feats.shape[1], -1)
            np.add.at(flat, (rows, slice(None), idx[:, 1]), zbar @ weights.T)
    return result, d_weights, d_feats


def _val_ap(model: ToySegModel, weights: np.ndarray, val_samples, space, sign) -> float:
    report = evaluate_regime(model, weights, val_samples, space, sign)
    if report.ap is not None:
        return report.ap
    return -float("inf")


# ---------------------------------------------------------------------------
# training entry points


def pretrain_toy_model(batches, cfg: TrainConfig, space: LabelSpace,
                       eval_samples: list[SegSample] | None = None,
                       accuracy_target: float = 0.90) -> ToySegModel:
    """Plain cross-entropy pretraining of the full toy network.

    ``batches`` yields lists of clean source-domain samples.  When
    ``eval_samples`` is given, the trained model must reach the pixel
    accuracy target on them.
    """
    model = ToySegModel(space.num_known_classes, width=cfg.model_width,
                        feature_dim=cfg.feature_dim, seed=cfg.seed)
    opt = Adam(model.parameters(), lr=cfg.learning_rate)
    for batch in batches:
        x = batch_images(batch)
        labels = np.stack([s.label for s in batch])
        eligible = space.is_known(labels)
        feats, logits = model.forward(x)
        ce, probs = pixel_cross_entropy(logits, labels, eligible)
        n = max(int(eligible.sum()), 1)
        if not np.isfinite(ce.sum()):
            raise FloatingPointError("pretraining loss diverged")
        wmap = eligible / n
        opt.zero_grad()
        model.backward(np.zeros_like(feats), cross_entropy_grad(probs, labels, wmap),
                       through_encoder=True)
        opt.step()
    if eval_samples is not None:
        acc = pixel_accuracy(model, eval_samples, space)
        if acc < accuracy_target:
            raise RuntimeError(
                f"pretraining reached pixel accuracy {acc:.3f} < {accuracy_target}; "
                f"increase steps (got {cfg.steps}) or the learning rate")
    return model


def pixel_accuracy(model: ToySegModel, samples: list[SegSample], space: LabelSpace,
                   batch_size: int = 8) -> float:
    hits = total = 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        preds = model.predict(batch_images(chunk))
        for p, s in zip(preds, chunk):
            known = space.is_known(s.label)
            hits += int((p[known] == s.label[known]).sum())
            total += int(known.sum())
    return hits / max(total, 1)


def run_stage1(model: ToySegModel, head: UncertaintyHead, batches, cfg: TrainConfig,
               space: LabelSpace, val_samples: list[SegSample] | None = None) -> Checkpoint:
    """Recalibrate the uncertainty projection on frozen features.

    Only the head weights move; the model is never touched.  The returned
    checkpoint carries the best head by validation AP when ``val_samples``
    is given (evaluated every ``eval_every`` steps), otherwise the final one.
    """
    if head.weights.shape != (model.feature_dim, model.num_classes):
        raise ValueError("head shape does not match the model")
    frozen_state = model.state()
    head_param = Param(head.weights.copy(), "head.weights")
    opt = Adam([head_param], lr=cfg.learning_rate)
    unc = _UncState(cfg)
    curve = []
    best = (-float("inf"), head_param.value.copy(), 0)
    last_good = head_param.value.copy()
    step = 0
    aborted = False

    if not cfg.learnable_head:
        # fixed-uncertainty ablation: there is nothing to train in stage 1
        batches = iter(())

    for step, batch in enumerate(batches, start=1):
        x = np.concatenate([batch_images([p.original for p in batch]),
                            batch_images([p.augmented for p in batch])])
        feats, _ = model.forward(x)
        result, d_weights, _ = _uncertainty_step(feats, batch, space, head_param.value,
                                                 cfg, unc, want_feature_grads=False)
        if not np.isfinite(result.loss):
            aborted = True
            head_param.value[...] = last_good
            break
        last_good = head_param.value.copy()
        opt.zero_grad()
        head_param.grad += d_weights
        opt.step()
        curve.append({"step": step, "loss": float(result.loss),
                      "terms": [float(t) for t in result.terms]})
        if val_samples is not None and (step % cfg.eval_every == 0):
            ap = _val_ap(model, head_param.value, val_samples, space, cfg.score_sign)
            curve[-1]["val_ap"] = ap
            if ap > best[0]:
                best = (ap, head_param.value.copy(), step)

    if val_samples is not None and step and not aborted:
        ap = _val_ap(model, head_param.value, val_samples, space, cfg.score_sign)
        if ap > best[0]:
            best = (ap, head_param.value.copy(), step)
    final_weights = best[1] if best[0] > -float("inf") else head_param.value
    metrics = {"selected_step": best[2] if best[0] > -float("inf") else step,
               "aborted": aborted}
    return Checkpoint(model_state=frozen_state, head_weights=final_weights.copy(),
                      head_mode=head.mode.value, step=step, config_hash=cfg.hash(),
                      metrics=metrics, curve=curve)


def run_stage2(model: ToySegModel, head: UncertaintyHead, batches, cfg: TrainConfig,
               space: LabelSpace, val_samples: list[SegSample] | None = None) -> Checkpoint:
    """Fine-tune decoder + classifier (+ head) under the combined objective.

    The encoder stays frozen.  Selection masks for the augmented term are
    recomputed per batch from the current per-pixel losses.  The incoming
    state counts as a candidate, so with validation-based selection the
    returned checkpoint is never worse than the input on validation AP.
    """
    head_param = Param(head.weights.copy(), "head.weights")
    trainable = model.parameters(("decoder", "classifier"))
    if cfg.learnable_head:
        trainable = trainable + [head_param]
    opt = Adam(trainable, lr=cfg.learning_rate)
    unc = _UncState(cfg)
    curve = []

    def weights_now() -> np.ndarray:
        return head_param.value if cfg.learnable_head else model.class_weights

    def snapshot() -> tuple:
        return (model.state(), weights_now().copy())

    best_ap = (_val_ap(model, weights_now(), val_samples, space, cfg.score_sign)
               if val_samples is not None else -float("inf"))
    best = (best_ap, snapshot(), 0)
    last_good = snapshot()
    step = 0
    aborted = False

    for step, batch in enumerate(batches, start=1):
        B = len(batch)
        orig_labels = np.stack([p.original.label for p in batch])
        aug_labels = np.stack([p.augmented.label for p in batch])
        x = np.concatenate([batch_images([p.original for p in batch]),
                            batch_images([p.augmented for p in batch])])
        feats, logits = model.forward(x)
        weights = weights_now()

        unc_result, d_weights, d_feats = _uncertainty_step(
            feats, batch, space, weights, cfg, unc, want_feature_grads=True)

        elig_o = space.is_known(orig_labels)
        ce_o, probs_o = pixel_cross_entropy(logits[:B], orig_labels, elig_o)
        n_o = max(int(elig_o.sum()), 1)
        l_seg_in = float(ce_o.sum() / n_o)

        elig_a = space.is_known(aug_labels)
        ce_a, probs_a = pixel_cross_entropy(logits[B:], aug_labels, elig_a)
        mask = build_selection_mask(ce_a, elig_a, cfg.selection_ratio)
        n_a = max(mask.num_selected, 1)
        l_seg_aug = float(ce_a[mask.eta].sum() / n_a)

        loss = total_loss(unc_result.loss, l_seg_in, l_seg_aug, cfg.weights)
        if not np.isfinite(loss):
            aborted = True
            state, w = last_good
            model.load_state(state)
            if cfg.learnable_head:
                head_param.value[...] = w
            break
        last_good = snapshot()

        d_logits = np.zeros_like(logits)
        d_logits[:B] = cross_entropy_grad(probs_o, orig_labels,
                                          cfg.weights.beta1 * elig_o / n_o)
        d_logits[B:] = cross_entropy_grad(probs_a, aug_labels,
                                          cfg.weights.beta2 * mask.eta / n_a)
        opt.zero_grad()
        model.backward(d_feats, d_logits, through_encoder=False)
        if cfg.learnable_head:
            head_param.grad += d_weights
        else:
            # tied head: contrastive gradient lands on the classifier weights
            model.classifier.weight.grad += d_weights.T.reshape(
                model.classifier.weight.value.shape)
        opt.step()
        curve.append({"step": step, "loss": float(loss), "l_unc": float(unc_result.loss),
                      "l_seg_in": l_seg_in, "l_seg_aug": l_seg_aug})
        if val_samples is not None and (step % cfg.eval_every == 0):
            ap = _val_ap(model, weights_now(), val_samples, space, cfg.score_sign)
            curve[-1]["val_ap"] = ap
            if ap > best[0]:
                best = (ap, snapshot(), step)

    if val_samples is not None and step and not aborted:
        ap = _val_ap(model, weights_now(), val_samples, space, cfg.score_sign)
        if ap > best[0]:
            best = (ap, snapshot(), step)

    if best[0] > -float("inf"):
        state, weights = best[1]
        selected_step = best[2]
    else:
        state, weights = snapshot()
        selected_step = step
    model.load_state(state)
    return Checkpoint(model_state=state, head_weights=np.array(weights, copy=True),
                      head_mode=head.mode.value, step=step, config_hash=cfg.hash(),
                      metrics={"selected_step": selected_step, "aborted": aborted},
                      curve=curve)


def run_two_stage(model: ToySegModel, pairs: list[AugmentedPair], cfg1: TrainConfig,
                  cfg2: TrainConfig, space: LabelSpace,
                  val_samples: list[SegSample] | None = None) -> tuple[Checkpoint, Checkpoint]:
    """Initialize the head from the classifier, run stage 1, then stage 2."""
    head = init_from_class_head(model.class_weights, HeadMode.PIXEL_ENERGY,
                                num_classes=space.num_known_classes)
    ck1 = run_stage1(model, head, pair_batches(pairs, cfg1.batch_size, cfg1.steps, cfg1.seed),
                     cfg1, space, val_samples=val_samples)
    ck2 = run_stage2(model, ck1.head(),
                     pair_batches(pairs, cfg2.batch_size, cfg2.steps, cfg2.seed),
                     cfg2, space, val_samples=val_samples)
    return ck1, ck2
