"""Command-line entry point.

Subcommands: preprocess, split, augment, eval, toy-train, grad-check.
Exit codes: 0 success, 1 invariant violation, 2 input error.
"""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import augment as aug
from . import interchange as ic
from .adapter import (
    ConfigError,
    ToyTrainConfig,
    TrainingDivergedError,
    build_detector,
    grad_check,
    make_anchor,
    make_check_functions,
    make_scenes,
    parse_config,
    render_config,
    toy_train,
    trajectory_csv,
)
from .augment import AugmentError
from .dataset import DatasetError
from .evaluation import EvaluationError, evaluate_detections, render_csv, render_table
from .geometry import GeometryError
from .interchange import InterchangeError
from .losses import LossError

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_INPUT = 2

INPUT_ERRORS = (
    DatasetError,
    AugmentError,
    ConfigError,
    InterchangeError,
    GeometryError,
    EvaluationError,
    LossError,
    FileNotFoundError,
    OSError,
)


class InvariantViolation(RuntimeError):
    pass


def subtile_png_name(tile_name: str, sub_tile: int) -> str:
    return f"{tile_name}_s{sub_tile:02d}.png"


def _log(args, message: str) -> None:
    if getattr(args, "verbose", False):
        print(message, file=sys.stderr)


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------

def cmd_preprocess(args) -> int:
    annotations = ds.read_annotations_csv(Path(args.annotations).read_text())
    rasters_dir = Path(args.rasters)
    out_dir = Path(args.out)
    (out_dir / "tiles").mkdir(parents=True, exist_ok=True)

    exclusions = []
    if args.exclusion_list:
        exclusions = [
            line.strip()
            for line in Path(args.exclusion_list).read_text().splitlines()
            if line.strip()
        ]

    def lookup(tile_name: str) -> np.ndarray:
        return ds.load_raster(rasters_dir / f"{tile_name}.png")

    result = ds.preprocess_corpus(
        annotations,
        lookup,
        exclusions=exclusions,
        accuracy_threshold=args.accuracy_threshold,
        black_level=args.black_level,
        max_black_fraction=args.max_black_fraction,
        min_diameter_px=args.min_diameter_px,
    )

    def save_record(rec):
        path = out_dir / "tiles" / subtile_png_name(rec.tile_id.serialize(), rec.sub_tile_index)
        ds.save_raster(path, rec.pixels)

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            list(pool.map(save_record, result.records))
    else:
        for rec in result.records:
            save_record(rec)

    with open(out_dir / "tiles.jsonl", "w") as fh:
        ds.write_records_jsonl(result.records, fh)
    (out_dir / "audit.csv").write_text(ds.audit_csv(result.audit))
    (out_dir / "exclusions.txt").write_text(
        "".join(name + "\n" for name in result.excluded_tiles)
    )
    _log(args, f"kept {result.kept} boxes across {len(result.records)} sub-tiles, "
               f"removed {len(result.audit)} annotations")
    print(f"preprocess: {len(result.records)} sub-tiles, {result.kept} boxes kept, "
          f"{len(result.audit)} removals -> {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# split
# ---------------------------------------------------------------------------

def cmd_split(args) -> int:
    ratios = tuple(float(v) for v in args.ratios.split(","))
    if len(ratios) != 3:
        raise DatasetError(f"--ratios needs three comma-separated values, got {args.ratios!r}")
    with open(args.tiles) as fh:
        records = ds.read_records_jsonl(fh)
    manifest = ds.grouped_split(records, ratios, args.seed)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "split_manifest.json").write_text(ds.manifest_to_json(manifest))

    by_split = {name: [] for name in ds.SPLIT_NAMES}
    for rec in records:
        by_split[manifest.split_of(rec.tile_id.image_id)].append(rec)
    for name, recs in by_split.items():
        with open(out_dir / f"{name}.jsonl", "w") as fh:
            ds.write_records_jsonl(recs, fh)

    # paranoia: re-derive the id sets and check disjointness before exit
    seen = {}
    for name, recs in by_split.items():
        for rec in recs:
            image_id = rec.tile_id.image_id
            if seen.setdefault(image_id, name) != name:
                raise InvariantViolation(f"image id {image_id} leaked across splits")
    counts = {name: len(recs) for name, recs in by_split.items()}
    print(f"split: {counts} tiles by {len(manifest.assignment)} image ids -> {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# augment
# ---------------------------------------------------------------------------

def cmd_augment(args) -> int:
    with open(args.tiles) as fh:
        records = ds.read_records_jsonl(fh)
    rasters_dir = Path(args.rasters)
    out_dir = Path(args.out)
    (out_dir / "aug_tiles").mkdir(parents=True, exist_ok=True)

    policies = None
    if args.policies:
        policies = aug.parse_policies(Path(args.policies).read_text())

    def augment_one(rec):
        tile_name = rec.tile_id.serialize()
        pixels = ds.load_raster(rasters_dir / subtile_png_name(tile_name, rec.sub_tile_index))
        seed = aug.derive_seed(args.seed, tile_name, rec.sub_tile_index)
        sample = aug.sample_and_apply(pixels, rec.boxes, seed, policies=policies)
        return rec, seed, sample

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(augment_one, records))
    else:
        results = [augment_one(rec) for rec in records]

    out_records = []
    extras = []
    log_lines = []
    for rec, seed, sample in results:
        tile_name = rec.tile_id.serialize()
        out_records.append(rec)
        extras.append({"augmented": False})
        aug_name = subtile_png_name(tile_name, rec.sub_tile_index).replace(".png", "_aug.png")
        ds.save_raster(out_dir / "aug_tiles" / aug_name, sample.pixels)
        aug_rec = ds.TileRecord(
            tile_id=rec.tile_id, sub_tile_index=rec.sub_tile_index, boxes=sample.boxes
        )
        out_records.append(aug_rec)
        extras.append({"augmented": True, "raster": f"aug_tiles/{aug_name}"})
        log_lines.append(
            json.dumps(
                {
                    "tile": tile_name,
                    "sub_tile": rec.sub_tile_index,
                    "seed": seed,
                    **json.loads(sample.log_json()),
                }
            )
        )

    with open(out_dir / "train_augmented.jsonl", "w") as fh:
        ds.write_records_jsonl(out_records, fh, extras=extras)
    (out_dir / "aug_log.jsonl").write_text("".join(line + "\n" for line in log_lines))

    if len(out_records) != 2 * len(records):
        raise InvariantViolation(
            f"augmentation must double the set: {len(records)} in, {len(out_records)} out"
        )
    print(f"augment: {len(records)} tiles in, {len(out_records)} records out -> {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    with open(args.predictions) as fh:
        _, pred_records = ic.read_predictions(fh)
    with open(args.gt) as fh:
        gt_records = ds.read_records_jsonl(fh)

    if args.anchor:
        anchor, _ = ic.read_anchor(Path(args.anchor).read_text())
        bad = ic.verify_scores(pred_records, anchor)
        if bad:
            key, stored, fresh = bad[0]
            print(
                f"score/embedding mismatch on {len(bad)} records "
                f"(first: {key} stored={stored} recomputed={fresh})",
                file=sys.stderr,
            )
            return EXIT_INVARIANT

    preds_by_key = {}
    for rec in pred_records:
        preds_by_key.setdefault((rec.tile_name, rec.sub_tile), []).append(rec.prediction)
    gts_by_key = {}
    for rec in gt_records:
        gts_by_key.setdefault(
            (rec.tile_id.serialize() if rec.tile_id else "", rec.sub_tile_index), []
        ).extend(rec.boxes)

    report = evaluate_detections(
        preds_by_key,
        gts_by_key,
        tp_iou=args.tp_iou,
        nms_iou=args.nms_iou,
        score_threshold=args.score_threshold,
    )
    table = render_table(report)
    print(table, end="")
    if args.out_table:
        Path(args.out_table).write_text(table)
    if args.out_csv:
        Path(args.out_csv).write_text(render_csv(report))
    return EXIT_OK


# ---------------------------------------------------------------------------
# toy-train / grad-check
# ---------------------------------------------------------------------------

def _load_train_config(args) -> ToyTrainConfig:
    if args.config:
        config = parse_config(Path(args.config).read_text())
    else:
        config = ToyTrainConfig()
    if args.seed is not None:
        config = ToyTrainConfig(**{**config.__dict__, "seed": args.seed})
    return config


def cmd_toy_train(args) -> int:
    config = _load_train_config(args)
    try:
        rows, _ = toy_train(config)
    except TrainingDivergedError as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    csv_text = trajectory_csv(rows)
    if args.out:
        Path(args.out).write_text(csv_text)
    else:
        print(csv_text, end="")
    ratio = rows[-1].l_total / rows[0].l_total if rows[0].l_total else float("nan")
    print(
        f"toy-train: {config.steps} steps, loss {rows[0].l_total:.4f} -> "
        f"{rows[-1].l_total:.4f} (ratio {ratio:.3f})",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_grad_check(args) -> int:
    config = _load_train_config(args)
    rng = np.random.default_rng(config.seed)
    detector = build_detector(config, rng)
    for _, p, _ in detector.trainables():
        p += rng.normal(0.0, 0.05, size=p.shape)
    scenes = make_scenes(config.n_scenes, config.grid, config.patch_px, rng, config.max_craters)
    anchor = make_anchor(config.d_e, rng)
    loss_at, grad_at, base = make_check_functions(detector, scenes, anchor, config)
    max_rel = grad_check(loss_at, grad_at, base)
    print(f"max_rel_error: {max_rel:.3e}")
    return EXIT_OK if max_rel < args.tolerance else EXIT_INVARIANT


def cmd_emit_config(args) -> int:
    print(render_config(ToyTrainConfig()), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="craterkit",
        description="Crater-detection pipeline toolkit: preprocessing, splits, "
        "augmentation, toy LoRA training and detection evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, default=None, help="deterministic seed (default: 0)")
        p.add_argument("--threads", type=int, default=1, help="worker threads (default: 1)")
        p.add_argument("--verbose", action="store_true", help="log progress to stderr")

    p = sub.add_parser("preprocess", help="filter and tile raw annotations")
    p.add_argument("--annotations", required=True, help="CSV: tile_name,cx,cy,r,accuracy")
    p.add_argument("--rasters", required=True, help="directory of <tile>.png 2048x2048 grayscale")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument(
        "--accuracy-threshold", type=float, default=ds.ACCURACY_THRESHOLD_DEFAULT,
        help="minimum consensus accuracy to keep (default: 0.55, paper value)",
    )
    p.add_argument(
        "--black-level", type=int, default=ds.BLACK_LEVEL_DEFAULT,
        help="intensity below this counts as black (default: 30, paper value)",
    )
    p.add_argument(
        "--max-black-fraction", type=float, default=ds.MAX_BLACK_FRACTION_DEFAULT,
        help="discard boxes blacker than this fraction (default: 0.85, paper value)",
    )
    p.add_argument(
        "--min-diameter-px", type=int, default=ds.MIN_DIAMETER_PX_DEFAULT,
        help="minimum crater diameter in source pixels (default: 8, paper value)",
    )
    p.add_argument("--exclusion-list", default=None, help="file of tile names to drop entirely")
    add_common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("split", help="grouped train/validation/test split")
    p.add_argument("--tiles", required=True, help="tiles.jsonl from preprocess")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument(
        "--ratios", default="0.8,0.1,0.1",
        help="train,val,test fractions (default: 0.8,0.1,0.1, paper split)",
    )
    add_common(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("augment", help="double a training split with sub-policies")
    p.add_argument("--tiles", required=True, help="split jsonl (e.g. train.jsonl)")
    p.add_argument("--rasters", required=True, help="directory of sub-tile PNGs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--policies", default=None, help="policy table file (default: built-in Table)")
    add_common(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("eval", help="recall/precision report from predictions")
    p.add_argument("--predictions", required=True, help="predictions JSON-lines file")
    p.add_argument("--gt", required=True, help="ground-truth tiles jsonl")
    p.add_argument("--anchor", default=None, help="anchor JSON to re-verify scores")
    p.add_argument(
        "--tp-iou", type=float, default=0.30,
        help="IoU strictly above this is a true positive (default: 0.30, paper value)",
    )
    p.add_argument(
        "--nms-iou", type=float, default=0.12,
        help="NMS removes overlaps strictly above this (default: 0.12, paper value)",
    )
    p.add_argument(
        "--score-threshold", type=float, default=0.0,
        help="discard predictions scoring below this (default: 0.0)",
    )
    p.add_argument("--out-table", default=None, help="write the text table here")
    p.add_argument("--out-csv", default=None, help="write the CSV report here")
    add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("toy-train", help="desk-scale LoRA training run")
    p.add_argument("--config", default=None, help="key = value config file (default: built-ins)")
    p.add_argument("--out", default=None, help="trajectory CSV path (default: stdout)")
    add_common(p)
    p.set_defaults(func=cmd_toy_train)

    p = sub.add_parser("grad-check", help="finite-difference gradient validation")
    p.add_argument("--config", default=None, help="key = value config file (default: built-ins)")
    p.add_argument(
        "--tolerance", type=float, default=1e-4,
        help="max relative error allowed (default: 1e-4)",
    )
    add_common(p)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("emit-config", help="print the default toy-train config")
    add_common(p)
    p.set_defaults(func=cmd_emit_config)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
