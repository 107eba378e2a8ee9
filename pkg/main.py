import argparse
import json
import logging
import os
import sys
from typing import List, Optional

import config
from config import HEAD_PRESETS, SAMPLING_PRESETS, PipelineConfig, SyntheticSpec, load_pipeline_config, override
from dataio import (VideoDataset, parse_annotations, parse_detections, read_bank, split_videos, write_bank,
                    write_detections)
from logger import setup_logging
from pipeline import (BACKBONE_FILE, FeatureExtractor, FeatureSet, TrainedHead, build_bank, evaluate, infer,
                      load_backbone, load_bank_if_needed, run_compare, train_head, write_extraction)
from reporting import Reporter, compare_records, eval_records
from synthetic import generate_synthetic, load_synthetic_spec

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


def _csv_floats(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _csv_ints(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def add_config_args(parser: argparse.ArgumentParser) -> None:
    """Flags mirroring PipelineConfig fields; unset flags leave the document value alone."""
    group = parser.add_argument_group("pipeline config")
    group.add_argument("--config", help="JSON config document")
    group.add_argument("--sampling", choices=sorted(SAMPLING_PRESETS), help="T x tau clip preset")
    group.add_argument("--crop-train", type=int, help="square actor crop side at training time")
    group.add_argument("--crop-test", type=int, help="square actor crop side at test time")
    group.add_argument("--expand-scale", type=float)
    group.add_argument("--feature-path", choices=("roipool", "cropresize"))
    group.add_argument("--use-scene", action=argparse.BooleanOptionalAction, default=None)
    group.add_argument("--use-lfb", action=argparse.BooleanOptionalAction, default=None)
    group.add_argument("--scene-size", type=int)
    group.add_argument("--window-seconds", type=int)
    group.add_argument("--lfb-dropout", type=float)
    group.add_argument("--head-preset", choices=sorted(HEAD_PRESETS))
    group.add_argument("--head-mode", choices=("multilabel", "singlelabel"))
    group.add_argument("--lr", type=float)
    group.add_argument("--iters", type=int)
    group.add_argument("--batch-size", type=int)
    group.add_argument("--weight-decay", type=float)
    group.add_argument("--dropout", type=float)
    group.add_argument("--train-fraction", type=float)
    group.add_argument("--seed", type=int)


def build_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_pipeline_config(args.config) if args.config else PipelineConfig()
    head = HEAD_PRESETS[args.head_preset] if args.head_preset else cfg.head
    head = override(head, mode=args.head_mode, lr=args.lr, iters=args.iters, batch_size=args.batch_size,
                    weight_decay=args.weight_decay, dropout=args.dropout)
    lfb = override(cfg.lfb, window_seconds=args.window_seconds, dropout_rate=args.lfb_dropout)
    return override(
        cfg,
        sampling=SAMPLING_PRESETS[args.sampling] if args.sampling else None,
        crop_train=(args.crop_train, args.crop_train) if args.crop_train else None,
        crop_test=(args.crop_test, args.crop_test) if args.crop_test else None,
        expand_scale=args.expand_scale,
        feature_path=args.feature_path,
        use_scene=args.use_scene,
        use_lfb=args.use_lfb,
        scene_size=args.scene_size,
        train_fraction=args.train_fraction,
        seed=args.seed,
        head=head,
        lfb=lfb,
    )


def cmd_synth(args) -> int:
    spec = load_synthetic_spec(args.spec) if args.spec else SyntheticSpec()
    spec = override(
        spec,
        seed=args.seed,
        num_videos=args.num_videos,
        num_scene_textures=args.num_scene_textures,
        box_size_distribution=tuple(_csv_floats(args.box_size_distribution)) if args.box_size_distribution else None,
    )
    dataset = generate_synthetic(spec, args.out)
    print(f"{len(dataset.manifest['videos'])} videos, {len(dataset.annotations)} annotations, "
          f"{len(dataset.proposals)} proposals -> {args.out}")
    return EXIT_OK


def _split_ids(dataset: VideoDataset, cfg: PipelineConfig, split: str) -> List[str]:
    if split == "all":
        return dataset.video_ids
    train_ids, val_ids = split_videos(dataset.video_ids, cfg.train_fraction)
    return train_ids if split == "train" else val_ids


def cmd_extract(args) -> int:
    cfg = build_config(args)
    dataset = VideoDataset(args.dataset)
    weights = load_backbone(args.backbone) if args.backbone else None
    extractor = FeatureExtractor(cfg, weights)
    features = extractor.extract(dataset, _split_ids(dataset, cfg, args.split), training=args.augment)
    summary = write_extraction(args.out, features, extractor.weights)
    with open(os.path.join(args.out, "extract_summary.json"), "w", encoding="utf-8") as f:
        f.write(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(f"{summary['entries']} actor features ({summary['skipped_keyframes']} key frames skipped) -> {args.out}")
    return EXIT_OK


def cmd_bank(args) -> int:
    features = FeatureSet.load(args.features)
    bank = build_bank(features)
    write_bank(args.out, bank)
    print(f"{len(bank)} bank entries -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = build_config(args)
    dataset = VideoDataset(args.dataset)
    features = FeatureSet.load(args.features)
    bank = load_bank_if_needed(cfg, args.bank)
    head = train_head(cfg, features, dataset.annotations, dataset.num_classes, bank)
    head.save(args.out)
    print(f"{head.params.mode} head, {head.params.num_classes} classes x {head.params.fused_dim} dims -> {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = build_config(args)
    features = FeatureSet.load(args.features)
    bank = load_bank_if_needed(cfg, args.bank)
    head = TrainedHead.load(args.head)
    detections = infer(cfg, features, head, bank)
    write_detections(args.out, detections)
    print(f"{len(detections)} detections -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    detections = parse_detections(args.detections)
    annotations = parse_annotations(args.annotations)
    bins = [b for b in args.bins.split(",") if b]
    report = evaluate(detections, annotations, bins)
    reporter = Reporter(args.out)
    text = reporter.render_eval(report)
    reporter.write(report, text, eval_records(report))
    print(text)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = build_config(args)
    dataset = VideoDataset(args.dataset)
    report = run_compare(dataset, cfg, scales=_csv_floats(args.scales or ""),
                         crop_sizes=_csv_ints(args.crop_sizes or ""))
    reporter = Reporter(args.out)
    text = reporter.render_compare(report)
    reporter.write(report, text, compare_records(report))
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crcnn", description="Context-aware RCNN action detection pipeline")
    parser.add_argument("--log-level", help="overrides LOG_LEVEL")
    parser.add_argument("--log-file", help="overrides LOG_FILE; empty string disables file logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render the synthetic glyph benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="JSON SyntheticSpec document")
    p.add_argument("--seed", type=int)
    p.add_argument("--num-videos", type=int)
    p.add_argument("--num-scene-textures", type=int)
    p.add_argument("--box-size-distribution", help="five comma-separated weights for XS,S,M,L,XL")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="extract actor and scene features plus the feature bank")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("all", "train", "val"), default="all")
    p.add_argument("--augment", action="store_true", help="training-time scale jitter and flips")
    p.add_argument("--backbone", help=f"reuse backbone weights (a {BACKBONE_FILE} from an earlier extract)")
    add_config_args(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("bank", help="rebuild the feature bank from a features directory")
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bank)

    p = sub.add_parser("train", help="train the action classifier")
    p.add_argument("--dataset", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--bank")
    p.add_argument("--out", required=True)
    add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="score every proposal for every class")
    p.add_argument("--features", required=True)
    p.add_argument("--bank")
    p.add_argument("--head", required=True)
    p.add_argument("--out", required=True)
    add_config_args(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="frame-level mAP with size and count breakdowns")
    p.add_argument("--detections", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--bins", default="size,count", help="comma-separated subset of size,count")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="RoI pooling vs crop+resize on one train/val split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scales", help="comma-separated expansion scales to sweep")
    p.add_argument("--crop-sizes", help="comma-separated crop sides to sweep")
    add_config_args(p)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_file, args.log_level)
    logger.info("Running %s", args.command)
    try:
        return args.func(args)
    except ValueError as e:
        logger.error("%s failed: %s", args.command, e)
        return EXIT_INVALID
    except OSError as e:
        logger.error("%s failed on I/O: %s", args.command, e)
        return EXIT_IO


if __name__ == '__main__':
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        logging.getLogger(__name__).info("Interrupted, shutting down...")
