"""crater-export command line.

Exit codes: 0 success, 1 finished with skipped tiles, 2 input error,
3 model unavailable.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .backends import BackendUnavailable, make_backend
from .export import ExportInputError, export_anchor, export_predictions

EXIT_OK = 0
EXIT_SKIPPED = 1
EXIT_INPUT = 2
EXIT_MODEL = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crater-export",
        description="Serialize detector predictions and the prompt anchor "
        "into the craterkit interchange format.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="run the detector over a tile directory")
    p.add_argument("--tiles", required=True, help="directory of sub-tile PNGs")
    p.add_argument("--prompt", default="crater", help="text prompt (default: crater)")
    p.add_argument("--out", required=True, help="predictions JSON-lines output path")
    p.add_argument(
        "--anchor-out", default=None,
        help="anchor JSON output path (default: <out dir>/anchor.json)",
    )
    p.add_argument(
        "--backend", choices=("owlv2", "synthetic"), default="owlv2",
        help="detector backend (default: owlv2; synthetic needs no checkpoint)",
    )
    p.add_argument("--model-id", default=None, help="override the pretrained model id")
    p.set_defaults(func=cmd_export)
    return parser


def cmd_export(args) -> int:
    tiles_dir = Path(args.tiles)
    if not tiles_dir.is_dir():
        print(f"error: --tiles {tiles_dir} is not a directory", file=sys.stderr)
        return EXIT_INPUT
    if not args.prompt:
        print("error: prompt must be non-empty", file=sys.stderr)
        return EXIT_INPUT

    try:
        backend = make_backend(args.backend, args.model_id)
    except BackendUnavailable as exc:
        print(f"model unavailable: {exc}", file=sys.stderr)
        print(
            "manifest note: wanted image_size=960 patch_size=16 "
            "token_count=3600 embedding_dim=512",
            file=sys.stderr,
        )
        return EXIT_MODEL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    anchor_path = Path(args.anchor_out) if args.anchor_out else out_path.parent / "anchor.json"

    try:
        anchor = export_anchor(backend, args.prompt, anchor_path)
    except ExportInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    tile_paths = sorted(tiles_dir.glob("*.png"))
    if not tile_paths:
        print(f"error: no PNG tiles under {tiles_dir}", file=sys.stderr)
        return EXIT_INPUT

    written, skipped = export_predictions(backend, tile_paths, anchor, args.prompt, out_path)
    for note in skipped:
        print(f"warning: skipped {note}", file=sys.stderr)
    print(
        f"export: {written} predictions from {len(tile_paths) - len(skipped)} tiles "
        f"-> {out_path} (anchor: {anchor_path})"
    )
    return EXIT_SKIPPED if skipped else EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
