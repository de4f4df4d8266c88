"""Command-line entry point.

Subcommands cover the full pipeline on the toy benchmark::

    dualshift generate  --dataset-dir runs/ds [--failure-rate 0.3] ...
    dualshift train     --dataset-dir runs/ds --stage both
    dualshift evaluate  --checkpoint runs/out/stage2.ckpt --dataset-dir runs/ds
    dualshift ablate    --dataset-dir runs/ds
    dualshift plot      --checkpoint runs/out/stage2.ckpt [--dataset-dir runs/ds]

Every config key is also a ``--kebab-case`` flag; ``--config file.json|yaml``
loads a file first and flags override it.  ``--print-config`` emits the fully
resolved configuration and exits.  The DUALSHIFT_OUTPUT_ROOT environment
variable re-roots all relative output paths.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, print_config
from .core import LabelSpace
from .datakit import LoadedDataset, ToyDataset, load_dataset, save_dataset, synthesize_splits
from .evaluation import regime_reports, score_samples
from .heads import HeadMode, init_from_class_head
from .losses import Margins
from .trainer import (
    Checkpoint,
    TrainConfig,
    load_checkpoint,
    pair_batches,
    pixel_accuracy,
    pretrain_toy_model,
    run_stage1,
    run_stage2,
    sample_batches,
    save_checkpoint,
)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="JSON or YAML config file")
    parser.add_argument("--print-config", action="store_true",
                        help="print the resolved config and exit")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f.name, default=None, metavar=str(f.default))


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for f in dataclasses.fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = value
    cfg = load_config(args.config, overrides)
    root = os.environ.get("DUALSHIFT_OUTPUT_ROOT")
    if root:
        for key in ("dataset_dir", "output_dir"):
            value = Path(getattr(cfg, key))
            if not value.is_absolute():
                setattr(cfg, key, str(Path(root) / value))
    return cfg


def _maybe_print_config(args, cfg) -> bool:
    if args.print_config:
        print(print_config(cfg))
        return True
    return False


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset_or_exit(cfg: RunConfig) -> LoadedDataset:
    try:
        return load_dataset(cfg.dataset_dir)
    except FileNotFoundError as exc:
        sys.exit(f"dataset not found: {exc}; run `dualshift generate --dataset-dir "
                 f"{cfg.dataset_dir}` first")


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    cfg = _resolve_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    world = cfg.toy_world()
    aug = cfg.augmentation()
    out = Path(cfg.dataset_dir)
    ds: ToyDataset | None = None
    try:
        ds = synthesize_splits(world, cfg.seed, aug_cfg=aug)
    except Exception as exc:
        # preserve whatever exists as a partial manifest before failing
        if ds is None:
            ds = ToyDataset(config=world, seed=cfg.seed)
        save_dataset(ds, out)
        print(f"generation failed: {exc}", file=sys.stderr)
        return 1
    manifest = save_dataset(ds, out)
    kept = sum(r["kept"] for r in manifest["pairs"])
    total = len(manifest["pairs"])
    retries = sum(r["attempts"] - 1 for r in manifest["pairs"])
    print(f"dataset written to {out}")
    print(f"augmented pairs: kept {kept}/{total} "
          f"(keep rate {kept / max(total, 1):.2%}, {retries} regenerations)")
    return 0


def _pretrain(cfg: RunConfig, data: LoadedDataset, out: Path) -> Checkpoint:
    space = data.label_space
    tcfg = cfg.stage_config(0)
    model = pretrain_toy_model(
        sample_batches(data.samples("train"), tcfg.batch_size, tcfg.steps, tcfg.seed),
        tcfg, space, eval_samples=data.samples("train"))
    head = init_from_class_head(model.class_weights, HeadMode.PIXEL_ENERGY,
                                num_classes=space.num_known_classes)
    ckpt = Checkpoint(model_state=model.state(), head_weights=head.weights,
                      head_mode=head.mode.value, step=tcfg.steps,
                      config_hash=tcfg.hash(),
                      metrics={"train_pixel_accuracy":
                               pixel_accuracy(model, data.samples("train"), space)})
    save_checkpoint(ckpt, out / "pretrain.ckpt")
    return ckpt


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    data = _load_dataset_or_exit(cfg)
    space = data.label_space
    out = _out_dir(cfg)
    stage = args.stage

    if args.pretrained:
        pre = load_checkpoint(args.pretrained)
    elif (out / "pretrain.ckpt").exists() and stage in ("1", "2"):
        pre = load_checkpoint(out / "pretrain.ckpt")
    else:
        print("pretraining the toy model ...")
        pre = _pretrain(cfg, data, out)
        print(f"pretrain pixel accuracy: {pre.metrics['train_pixel_accuracy']:.3f}")
    if not data.pairs:
        sys.exit("dataset has no kept augmented pairs; regenerate with a lower "
                 "failure rate or more retries")

    val = data.splits.get("val_joint")
    history = {}
    if stage in ("1", "both"):
        tcfg = cfg.stage_config(1)
        model = pre.build_model(space.num_known_classes, tcfg)
        head = init_from_class_head(model.class_weights, HeadMode.PIXEL_ENERGY,
                                    num_classes=space.num_known_classes)
        ck1 = run_stage1(model, head,
                         pair_batches(data.pairs, tcfg.batch_size, tcfg.steps, tcfg.seed),
                         tcfg, space, val_samples=val)
        save_checkpoint(ck1, out / "stage1.ckpt")
        history["stage1"] = ck1.curve
        print(f"stage 1 done ({ck1.step} steps); checkpoint at {out / 'stage1.ckpt'}")
    if stage in ("2", "both"):
        source = out / "stage1.ckpt"
        if not source.exists():
            sys.exit(f"stage 2 needs a stage-1 checkpoint at {source}")
        ck1 = load_checkpoint(source)
        tcfg = cfg.stage_config(2)
        model = ck1.build_model(space.num_known_classes, tcfg)
        ck2 = run_stage2(model, ck1.head(),
                         pair_batches(data.pairs, tcfg.batch_size, tcfg.steps, tcfg.seed + 1),
                         tcfg, space, val_samples=val)
        save_checkpoint(ck2, out / "stage2.ckpt")
        history["stage2"] = ck2.curve
        print(f"stage 2 done ({ck2.step} steps); checkpoint at {out / 'stage2.ckpt'}")
    (out / "curves.json").write_text(json.dumps(history, indent=1))
    return 0


def _finite(report_dict: dict) -> bool:
    for key in ("auroc", "ap", "fpr95", "miou", "macc"):
        value = report_dict.get(key)
        if value is not None and not np.isfinite(value):
            return False
    return True


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    data = _load_dataset_or_exit(cfg)
    space = data.label_space
    ckpt = load_checkpoint(args.checkpoint)
    tcfg = cfg.stage_config(2)
    if ckpt.head_weights.shape[1] != space.num_known_classes:
        sys.exit(f"label-space mismatch: checkpoint head has "
                 f"{ckpt.head_weights.shape[1]} classes, dataset has "
                 f"{space.num_known_classes}")
    model = ckpt.build_model(space.num_known_classes, tcfg)
    out = _out_dir(cfg)
    part = args.part
    reports = regime_reports(model, ckpt.head_weights, data.splits, space,
                             part=part, sign=cfg.score_sign)
    ok = True
    for regime, report in reports.items():
        (out / f"report_{part}_{regime}.txt").write_text(report.to_text())
        (out / f"report_{part}_{regime}.json").write_text(report.to_json())
        ok = ok and _finite(report.to_dict())
        line = ", ".join(f"{k}={v:.4f}" for k, v in report.to_dict().items()
                         if isinstance(v, float) and v is not None)
        print(f"{part}_{regime}: {line}")
    _plot_histograms(model, ckpt, data, space, part, out, cfg.score_sign)
    if args.dump_maps:
        _dump_maps(model, ckpt, data, space, part, out, cfg.score_sign)
    return 0 if ok else 1


def _plot_histograms(model, ckpt, data, space, part, out, sign) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for regime in ("sem", "joint"):
        split = f"{part}_{regime}"
        if split not in data.splits:
            continue
        samples = data.splits[split]
        maps, _ = score_samples(model, ckpt.head_weights, samples, sign)
        inlier, outlier = [], []
        for amap, s in zip(maps, samples):
            inlier.append(amap[space.is_known(s.label)])
            outlier.append(amap[s.label == space.ood_id])
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.hist(np.concatenate(inlier), bins=60, alpha=0.6, label="inlier", density=True)
        ax.hist(np.concatenate(outlier), bins=60, alpha=0.6, label="outlier", density=True)
        ax.set_xlabel("anomaly score")
        ax.set_ylabel("density")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / f"score_hist_{split}.png", dpi=120)
        plt.close(fig)


def _dump_maps(model, ckpt, data, space, part, out, sign) -> None:
    from PIL import Image

    map_dir = out / "uncertainty_maps"
    map_dir.mkdir(parents=True, exist_ok=True)
    for regime in ("in", "cov", "sem", "joint"):
        split = f"{part}_{regime}"
        if split not in data.splits:
            continue
        samples = data.splits[split]
        maps, _ = score_samples(model, ckpt.head_weights, samples, sign)
        lo = min(float(m.min()) for m in maps)
        hi = max(float(m.max()) for m in maps)
        scale = 255.0 / max(hi - lo, 1e-9)
        for amap, s in zip(maps, samples):
            gray = ((amap - lo) * scale).clip(0, 255).astype(np.uint8)
            Image.fromarray(gray, mode="L").save(map_dir / f"{split}_{s.sample_id}.png")


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    data = _load_dataset_or_exit(cfg)
    space = data.label_space
    out = _out_dir(cfg)
    pre = load_checkpoint(args.pretrained) if args.pretrained else _pretrain(cfg, data, out)
    val = data.splits.get("val_joint")

    rows = []

    def run_variant(name: str, learnable: bool, variant: str, ratio: float,
                    margin_scale: float = 1.0):
        t1 = dataclasses.replace(cfg.stage_config(1), learnable_head=learnable,
                                 loss_variant=variant,
                                 margins=cfg.margins().scaled(margin_scale))
        t2 = dataclasses.replace(cfg.stage_config(2), learnable_head=learnable,
                                 loss_variant=variant, selection_ratio=ratio,
                                 margins=cfg.margins().scaled(margin_scale))
        model = pre.build_model(space.num_known_classes, t1)
        head = init_from_class_head(model.class_weights, HeadMode.PIXEL_ENERGY,
                                    num_classes=space.num_known_classes)
        ck1 = run_stage1(model, head, pair_batches(data.pairs, t1.batch_size, t1.steps,
                                                   t1.seed), t1, space, val_samples=val)
        model = ck1.build_model(space.num_known_classes, t2)
        ck2 = run_stage2(model, ck1.head(), pair_batches(data.pairs, t2.batch_size,
                                                         t2.steps, t2.seed + 1),
                         t2, space, val_samples=val)
        final = ck2.build_model(space.num_known_classes, t2)
        reports = regime_reports(final, ck2.head_weights, data.splits, space,
                                 part="test", sign=cfg.score_sign)
        joint = reports["joint"]
        cov = reports["cov"]
        rows.append({
            "name": name, "learnable_head": learnable, "loss_variant": variant,
            "selection_ratio": ratio, "margin_scale": margin_scale,
            "joint_auroc": joint.auroc, "joint_ap": joint.ap, "joint_fpr95": joint.fpr95,
            "cov_miou": cov.miou,
        })
        print(f"{name:28s} AP={joint.ap:.4f} AUROC={joint.auroc:.4f} "
              f"FPR95={joint.fpr95:.4f} cov mIoU={cov.miou:.4f}")

    ratio = cfg.selection_ratio
    for learnable in (True, False):
        for variant in ("relative", "absolute"):
            for selected in (True, False):
                name = (f"head={'on' if learnable else 'off'}/"
                        f"{variant}/sel={'on' if selected else 'off'}")
                run_variant(name, learnable, variant, ratio if selected else 1.0)
    for scale in (0.1, 1.0, 10.0):
        run_variant(f"margins x{scale}", True, "relative", ratio, margin_scale=scale)

    header = list(rows[0].keys())
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(
            f"{row[k]:.6f}" if isinstance(row[k], float) else str(row[k]) for k in header))
    (out / "ablation_table.tsv").write_text("\n".join(lines) + "\n")
    (out / "ablation_table.json").write_text(json.dumps(rows, indent=1))
    print(f"ablation table ({len(rows)} rows) written to {out / 'ablation_table.tsv'}")
    return 0


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cfg = _resolve_config(args)
    if _maybe_print_config(args, cfg):
        return 0
    out = _out_dir(cfg)
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.curve:
        steps = [c["step"] for c in ckpt.curve]
        losses = [c["loss"] for c in ckpt.curve]
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(steps, losses, lw=1)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        fig.tight_layout()
        fig.savefig(out / "training_curve.png", dpi=120)
        plt.close(fig)
        print(f"training curve -> {out / 'training_curve.png'}")
    else:
        print("checkpoint has no training curve; nothing to plot")
    if args.dataset_dir or cfg.dataset_dir:
        try:
            data = load_dataset(cfg.dataset_dir)
        except FileNotFoundError:
            return 0
        space = data.label_space
        model = ckpt.build_model(space.num_known_classes, cfg.stage_config(2))
        _plot_histograms(model, ckpt, data, space, "test", out, cfg.score_sign)
        print(f"score histograms -> {out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dualshift",
                                     description="Segmentation under joint semantic "
                                                 "and covariate shift, desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="synthesize the toy dataset with "
                                            "coherent augmentation and filtering")
    _add_config_flags(p_gen)
    p_gen.set_defaults(func=cmd_generate)

    p_train = sub.add_parser("train", help="two-stage noise-aware training")
    _add_config_flags(p_train)
    p_train.add_argument("--stage", choices=("1", "2", "both"), default="both")
    p_train.add_argument("--pretrained", default=None,
                         help="existing pretrain checkpoint to start from")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="per-regime metric reports and plots")
    _add_config_flags(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--part", choices=("val", "test"), default="test")
    p_eval.add_argument("--dump-maps", action="store_true",
                        help="write one grayscale uncertainty image per input")
    p_eval.set_defaults(func=cmd_evaluate)

    p_abl = sub.add_parser("ablate", help="2^3 component grid plus margin-scale sweep")
    _add_config_flags(p_abl)
    p_abl.add_argument("--pretrained", default=None)
    p_abl.set_defaults(func=cmd_ablate)

    p_plot = sub.add_parser("plot", help="training-curve and score-histogram plots")
    _add_config_flags(p_plot)
    p_plot.add_argument("--checkpoint", required=True)
    p_plot.set_defaults(func=cmd_plot)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
