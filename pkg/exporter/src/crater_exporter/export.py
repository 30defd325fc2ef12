"""Serialization of backend outputs into the interchange files.

Prediction lines carry '<tile>#<sub>' keys, normalized cxcywh boxes, the
full class embedding and its anchor cosine; the first line is a manifest
header. No NMS and no score threshold are applied here.
"""
from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Iterable, List, Optional, Tuple

import numpy as np
from PIL import Image

TILE_ID_RE = re.compile(r"^.+_\d+_\d+_\d+$")
SUBTILE_RE = re.compile(r"^(.+_\d+_\d+_\d+)_s(\d+)$")


class ExportInputError(ValueError):
    """Bad prompt or unusable tile directory."""


def tile_key_from_stem(stem: str) -> Optional[str]:
    """Map a PNG filename stem to the '<tile>#<sub>' interchange key.

    '<tileid>_sNN' names (as written by the preprocessing tooling) carry
    their sub-tile index; a bare tile id means sub-tile 0. Anything else is
    unusable.
    """
    m = SUBTILE_RE.match(stem)
    if m:
        sub = int(m.group(2))
        if 0 <= sub <= 15:
            return f"{m.group(1)}#{sub}"
        return None
    if TILE_ID_RE.match(stem):
        return f"{stem}#0"
    return None


def export_anchor(backend, prompt: str, out_path: Path) -> np.ndarray:
    """Write the L2-normalized prompt embedding with the manifest."""
    if not prompt:
        raise ExportInputError("prompt must be a non-empty string")
    anchor = backend.encode_prompt(prompt)
    obj = {
        "anchor": [float(v) for v in anchor],
        "manifest": backend.manifest(prompt).to_dict(),
    }
    Path(out_path).write_text(json.dumps(obj))
    return anchor


def export_predictions(
    backend,
    tile_paths: Iterable[Path],
    anchor: np.ndarray,
    prompt: str,
    out_path: Path,
) -> Tuple[int, List[str]]:
    """Run the backend over tiles and append one record per emitted box.

    Returns (records written, skipped tile names). Unreadable or
    unparseable tiles are skipped with a warning entry.
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    anchor = anchor / np.linalg.norm(anchor)
    skipped: List[str] = []
    written = 0
    with open(out_path, "w") as fh:
        fh.write(json.dumps({"manifest": backend.manifest(prompt).to_dict()}) + "\n")
        for path in tile_paths:
            path = Path(path)
            key = tile_key_from_stem(path.stem)
            if key is None:
                skipped.append(f"{path.name}: name does not identify a tile")
                continue
            try:
                with Image.open(path) as img:
                    pixels = np.asarray(img.convert("L"), dtype=np.uint8)
            except OSError as exc:
                skipped.append(f"{path.name}: {exc}")
                continue
            boxes, embeddings = backend.detect(pixels)
            scores = embeddings @ anchor
            for box, emb, score in zip(boxes, embeddings, scores):
                record = {
                    "tile": key,
                    "box": [float(v) for v in box],
                    "score": float(np.clip(score, -1.0, 1.0)),
                    "embedding": [float(v) for v in emb],
                }
                fh.write(json.dumps(record) + "\n")
                written += 1
    return written, skipped
