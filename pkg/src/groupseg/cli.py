"""Command-line entry point.

Subcommands: build-entity-set, filter-corpus, make-synthetic, train,
evaluate, segment, probe, plot. Exit codes: 0 success, 2 usage error,
3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import torch

from . import corpus as corpus_mod
from .config import PRESETS, load_config
from .corpus import CorpusError, EntitySet, build_entity_set, filter_corpus, read_corpus
from .inference import (
    CLASS_TEMPLATES,
    compute_miou,
    embed_classes,
    load_class_names,
    load_label_map,
    mask_probe,
    save_label_map,
    segment,
)
from .model import GroupSegModel
from .synthetic import make_synthetic
from .tokenizer import Tokenizer
from .train import NumericError, Trainer, load_checkpoint, load_image


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="groupseg")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-entity-set", help="count candidate nouns over a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--size", type=int, default=100)
    p.add_argument("--stoplist")
    p.add_argument("--candidates")
    p.add_argument("--no-plural-fold", action="store_true")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("filter-corpus", help="keep pairs whose caption has an entity")
    p.add_argument("--corpus", required=True)
    p.add_argument("--entities", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-plural-fold", action="store_true")
    _add_common(p)

    p = sub.add_parser("make-synthetic", help="render a shape corpus with gt masks")
    p.add_argument("--n-images", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--shapes", default="circle,square,triangle,cross")
    p.add_argument("--colors", default="red,green,blue")
    p.add_argument("--no-masks", action="store_true")
    _add_common(p)

    p = sub.add_parser("train", help="train on a filtered corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--entities", required=True)
    p.add_argument("--config")
    p.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    p.add_argument("--set", action="append", default=[], help="dotted.key=value override")
    p.add_argument("--resume")
    _add_common(p)

    p = sub.add_parser("evaluate", help="zero-shot segmentation mIoU on a labeled split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True, help="JSONL with image_path and mask_path")
    p.add_argument("--classes", required=True, help="index-to-name JSON")
    p.add_argument("--bkg-threshold", type=float, default=0.0)
    p.add_argument("--save-maps", action="store_true")
    _add_common(p)

    p = sub.add_parser("segment", help="segment a single image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--classes", required=True)
    p.add_argument("--bkg-threshold", type=float, default=0.0)
    _add_common(p)

    p = sub.add_parser("probe", help="class-agnostic mask probing over a labeled split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--keep-fraction", type=float, default=None, help="default: per-image gt area fraction")
    _add_common(p)

    p = sub.add_parser("plot", help="loss curves and per-class IoU bars")
    p.add_argument("--metrics")
    p.add_argument("--report")
    _add_common(p)
    return parser


def _read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip() and not line.startswith("#")]


def cmd_build_entity_set(args) -> int:
    pairs = read_corpus(args.corpus)
    stoplist = _read_lines(args.stoplist) if args.stoplist else []
    candidates = _read_lines(args.candidates) if args.candidates else None
    omega = build_entity_set(
        (p.caption for p in pairs),
        max_size=args.size,
        stoplist=stoplist,
        candidates=candidates,
        plural_fold=not args.no_plural_fold,
    )
    if not omega.entities:
        raise CorpusError("no candidate nouns found in any caption")
    omega.save(args.out)
    print(f"wrote {len(omega.entities)} entities to {args.out}")
    return 0


def cmd_filter_corpus(args) -> int:
    pairs = read_corpus(args.corpus)
    omega = EntitySet.load(args.entities)
    tokenizer = Tokenizer.from_corpus(p.caption for p in pairs)
    triplets, stats = filter_corpus(
        pairs, omega, tokenizer, max_len=32, plural_fold=not args.no_plural_fold
    )
    with open(args.out, "w", encoding="utf-8") as f:
        for t in triplets:
            rec = {
                "id": t.pair.id,
                "image_path": t.pair.image_path,
                "caption": t.pair.caption,
                "entities": list(t.entities),
            }
            if t.pair.mask_path is not None:
                rec["mask_path"] = t.pair.mask_path
            f.write(json.dumps(rec) + "\n")
    print(f"kept {stats.kept}/{stats.total} pairs ({stats.skipped} skipped)")
    return 0


def cmd_make_synthetic(args) -> int:
    shapes = args.shapes.split(",")
    colors = {c: corpus_default_colors()[c] for c in args.colors.split(",")}
    corpus_path, classes_path = make_synthetic(
        args.n_images,
        args.out_dir,
        shapes=shapes,
        colors=colors,
        size=args.size,
        seed=args.seed,
        with_masks=not args.no_masks,
    )
    print(f"corpus: {corpus_path}\nclasses: {classes_path}")
    return 0


def corpus_default_colors():
    from .synthetic import DEFAULT_COLORS

    return DEFAULT_COLORS


def cmd_train(args) -> int:
    cfg = load_config(args.config, preset=args.preset, overrides=args.set)
    cfg.train.seed = args.seed if args.seed is not None else cfg.train.seed
    torch.manual_seed(cfg.train.seed)
    pairs = read_corpus(args.corpus, require_images=True)
    omega = EntitySet.load(args.entities)
    tokenizer = Tokenizer.from_corpus(p.caption for p in pairs)
    cfg.text.vocab_size = max(cfg.text.vocab_size, tokenizer.vocab_size)
    triplets, stats = filter_corpus(pairs, omega, tokenizer, cfg.text.max_len)
    if not triplets:
        raise CorpusError("no usable triplets after filtering")
    resume_payload = None
    if args.resume:
        model, momentum, tokenizer, train_cfg, payload = load_checkpoint(args.resume)
        trainer = Trainer(model, tokenizer, triplets, train_cfg, args.out_dir)
        trainer.momentum = momentum
        resume_payload = payload
    else:
        model = GroupSegModel(cfg.visual, cfg.text, cfg.loss)
        trainer = Trainer(model, tokenizer, triplets, cfg.train, args.out_dir)
    ckpt = trainer.fit(resume_payload)
    print(f"checkpoint: {ckpt}  (trained on {stats.kept}/{stats.total} pairs)")
    return 0


def _load_eval_records(path):
    records = read_corpus(path)
    for r in records:
        if r.mask_path is None:
            raise CorpusError(f"record {r.id!r} has no mask_path")
    return records


def cmd_evaluate(args) -> int:
    model, _, tokenizer, _, _ = load_checkpoint(args.ckpt)
    model.eval()
    names = load_class_names(args.classes)
    classes = embed_classes(names, CLASS_TEMPLATES, model, tokenizer)
    records = _load_eval_records(args.corpus)
    preds, gts = [], []
    os.makedirs(args.out_dir, exist_ok=True)
    for rec in records:
        image = load_image(rec.image_path, model.visual_cfg.image_size)
        result = segment(image, model, classes, args.bkg_threshold)
        preds.append(result.labels)
        gts.append(load_label_map(rec.mask_path))
        if args.save_maps:
            save_label_map(result.labels, os.path.join(args.out_dir, f"{rec.id}_pred.png"))
    report = compute_miou(preds, gts, names)
    report_path = os.path.join(args.out_dir, "eval_report.json")
    report.save(report_path)
    print(f"mIoU {report.miou:.4f} over {len(records)} images -> {report_path}")
    return 0


def cmd_segment(args) -> int:
    model, _, tokenizer, _, _ = load_checkpoint(args.ckpt)
    model.eval()
    names = load_class_names(args.classes)
    classes = embed_classes(names, CLASS_TEMPLATES, model, tokenizer)
    image = load_image(args.image, model.visual_cfg.image_size)
    result = segment(image, model, classes, args.bkg_threshold)
    os.makedirs(args.out_dir, exist_ok=True)
    out_path = os.path.join(args.out_dir, "segmentation.png")
    save_label_map(result.labels, out_path)
    print(f"wrote {out_path}")
    return 0


def cmd_probe(args) -> int:
    model, _, _, _, _ = load_checkpoint(args.ckpt)
    model.eval()
    records = _load_eval_records(args.corpus)
    grid = model.visual_cfg.image_size // model.visual_cfg.patch_size
    scores = []
    for rec in records:
        image = load_image(rec.image_path, model.visual_cfg.image_size)
        with torch.no_grad():
            state = model.encode_image(image[None])
        gt = load_label_map(rec.mask_path)
        patch_gt = _downsample_mask(gt >= 0, grid)
        keep = args.keep_fraction if args.keep_fraction is not None else max(
            1.0 / patch_gt.size, float(patch_gt.mean())
        )
        scores.append(mask_probe(state.affinity[0], patch_gt, keep))
    mean = float(np.mean(scores)) if scores else 0.0
    os.makedirs(args.out_dir, exist_ok=True)
    out_path = os.path.join(args.out_dir, "probe_report.json")
    with open(out_path, "w", encoding="utf-8") as f:
        json.dump({"mean_jaccard": mean, "per_image": scores}, f, indent=2)
    print(f"mean Jaccard {mean:.4f} over {len(records)} images -> {out_path}")
    return 0


def _downsample_mask(mask: np.ndarray, grid: int) -> np.ndarray:
    """Majority-pool a pixel mask onto the patch grid."""
    h, w = mask.shape
    ph, pw = h // grid, w // grid
    pooled = mask[: grid * ph, : grid * pw].reshape(grid, ph, grid, pw).mean(axis=(1, 3))
    return pooled > 0.5


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(args.out_dir, exist_ok=True)
    wrote = []
    if args.metrics:
        steps, curves = [], {"L_contrast": [], "L_entity": [], "L_mask": [], "L_total": []}
        with open(args.metrics, encoding="utf-8") as f:
            for line in f:
                rec = json.loads(line)
                steps.append(rec["step"])
                for k in curves:
                    curves[k].append(rec[k])
        fig, ax = plt.subplots(figsize=(7, 4))
        for k, v in curves.items():
            ax.plot(steps, v, label=k)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend()
        path = os.path.join(args.out_dir, "loss_curves.png")
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        wrote.append(path)
    if args.report:
        with open(args.report, encoding="utf-8") as f:
            report = json.load(f)
        items = sorted(report["per_class_iou"].items())
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.bar([k for k, _ in items], [v for _, v in items])
        ax.set_ylabel("IoU")
        ax.tick_params(axis="x", rotation=45)
        path = os.path.join(args.out_dir, "per_class_iou.png")
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        wrote.append(path)
    if not wrote:
        raise CorpusError("plot needs --metrics and/or --report")
    print("wrote " + ", ".join(wrote))
    return 0


COMMANDS = {
    "build-entity-set": cmd_build_entity_set,
    "filter-corpus": cmd_filter_corpus,
    "make-synthetic": cmd_make_synthetic,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "segment": cmd_segment,
    "probe": cmd_probe,
    "plot": cmd_plot,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return COMMANDS[args.command](args)
    except (CorpusError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
