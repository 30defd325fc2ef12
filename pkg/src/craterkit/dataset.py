"""IMPACT-style annotation ingestion and cleaning.

Tile-name parsing, accuracy and minimum-size filters, black-region
rejection, 2048 -> 512 tiling with center-in-tile box assignment, and
leakage-free splits grouped by parent image id. Every removed annotation
is attributed to exactly one reason so counts reconcile.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .geometry import Box, GeometryError, circle_to_box

SOURCE_TILE_PX = 2048
SUB_TILE_PX = 512
SUB_GRID = SOURCE_TILE_PX // SUB_TILE_PX  # 4x4 sub-tiles

ACCURACY_THRESHOLD_DEFAULT = 0.55
BLACK_LEVEL_DEFAULT = 30
MAX_BLACK_FRACTION_DEFAULT = 0.85
MIN_DIAMETER_PX_DEFAULT = 8

REASON_EXCLUDED = "excluded"
REASON_ACCURACY = "accuracy"
REASON_SIZE = "size"
REASON_BLACK = "black-fraction"
REASON_CLIP = "clip-shrink"


class DatasetError(ValueError):
    """Malformed dataset input."""


@dataclass(frozen=True)
class TileId:
    """Parent image id plus the tile's upper-left corner and size."""

    image_id: str
    x_min: int
    y_min: int
    tile_size: int

    def serialize(self) -> str:
        return f"{self.image_id}_{self.x_min}_{self.y_min}_{self.tile_size}"


def parse_tile_id(name: str) -> TileId:
    """Parse `<image_id>_<x_min>_<y_min>_<tile_size>`.

    The image id may itself contain underscores; the last three fields are
    the numeric ones.
    """
    parts = name.split("_")
    if len(parts) < 4:
        raise DatasetError(
            f"cannot parse tile name {name!r}: expected at least 4 underscore-separated fields"
        )
    image_id = "_".join(parts[:-3])
    numbers = []
    for label, text in zip(("x_min", "y_min", "tile_size"), parts[-3:]):
        if not text.isdigit():
            raise DatasetError(f"cannot parse tile name {name!r}: field {label}={text!r} is not a non-negative integer")
        numbers.append(int(text))
    tid = TileId(image_id, *numbers)
    if tid.serialize() != name:
        raise DatasetError(f"tile name {name!r} does not round-trip")
    return tid


@dataclass(frozen=True)
class CircleAnnotation:
    """Normalized circle with the consensus accuracy score."""

    cx: float
    cy: float
    r: float
    accuracy: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise DatasetError(f"annotation center ({self.cx}, {self.cy}) outside [0, 1]")
        if not (self.r > 0.0):
            raise DatasetError(f"annotation radius must be positive, got {self.r}")
        if not (0.0 <= self.accuracy <= 1.0):
            raise DatasetError(f"accuracy {self.accuracy} outside [0, 1]")


@dataclass
class TileRecord:
    """One 512x512 sub-tile with its normalized boxes.

    source_indices maps each box back to the input annotation it came
    from, for removal reconciliation. pixels is None for metadata-only
    records (for example, read back from JSON lines).
    """

    tile_id: Optional[TileId]
    sub_tile_index: int
    boxes: List[Box] = field(default_factory=list)
    pixels: Optional[np.ndarray] = None
    source_indices: List[int] = field(default_factory=list)

    def key(self) -> Tuple[str, int]:
        return (self.tile_id.serialize() if self.tile_id else "", self.sub_tile_index)


@dataclass(frozen=True)
class SplitManifest:
    """Whole parent-image assignment to train/validation/test."""

    assignment: Dict[str, str]
    seed: int
    ratios: Tuple[float, float, float]

    def split_of(self, image_id: str) -> str:
        return self.assignment[image_id]


SPLIT_NAMES = ("train", "validation", "test")


# ---------------------------------------------------------------------------
# Filters
# ---------------------------------------------------------------------------

def filter_annotations(
    anns: Sequence[CircleAnnotation],
    accuracy_threshold: float = ACCURACY_THRESHOLD_DEFAULT,
    min_diameter_px: int = MIN_DIAMETER_PX_DEFAULT,
    source_px: int = SOURCE_TILE_PX,
) -> List[CircleAnnotation]:
    """Keep annotations with accuracy >= threshold and diameter >= minimum.

    Both comparisons are inclusive; order is preserved.
    """
    if accuracy_threshold < 0 or min_diameter_px < 0:
        raise DatasetError("thresholds must be non-negative")
    return [
        a
        for a in anns
        if a.accuracy >= accuracy_threshold and 2.0 * a.r * source_px >= min_diameter_px
    ]


def black_pixel_filter(
    pixels: np.ndarray,
    ann: CircleAnnotation,
    black_level: int = BLACK_LEVEL_DEFAULT,
    max_black_fraction: float = MAX_BLACK_FRACTION_DEFAULT,
) -> bool:
    """True when the annotation's box region is not overwhelmingly black.

    The fraction of pixels strictly below black_level is measured over the
    annotation's bounding box; discard requires strictly more than
    max_black_fraction.
    """
    pixels = np.asarray(pixels)
    h, w = pixels.shape
    box = circle_to_box(ann.cx, ann.cy, ann.r)
    x1, y1, x2, y2 = box.corners
    c1, c2 = int(math.floor(x1 * w)), int(math.ceil(x2 * w))
    r1, r2 = int(math.floor(y1 * h)), int(math.ceil(y2 * h))
    region = pixels[max(r1, 0) : min(r2, h), max(c1, 0) : min(c2, w)]
    if region.size == 0:
        return True
    fraction = float(np.count_nonzero(region < black_level)) / region.size
    return fraction <= max_black_fraction


# ---------------------------------------------------------------------------
# Tiling
# ---------------------------------------------------------------------------

def tile_image(
    pixels: np.ndarray,
    boxes: Sequence[Box],
    tile_id: Optional[TileId] = None,
    min_diameter_px: int = MIN_DIAMETER_PX_DEFAULT,
) -> List[TileRecord]:
    """Cut a 2048 raster into 16 row-major 512 sub-tiles.

    A box belongs to the sub-tile containing its center (boundary centers
    go to the higher-index tile), is clipped to that sub-tile and
    renormalized. Boxes whose clipped smaller side falls below the minimum
    source-pixel diameter are dropped; survivors carry their input index.
    """
    pixels = np.asarray(pixels)
    if pixels.shape != (SOURCE_TILE_PX, SOURCE_TILE_PX):
        raise DatasetError(
            f"expected a {SOURCE_TILE_PX}x{SOURCE_TILE_PX} raster, got {pixels.shape}"
        )
    records = [
        TileRecord(
            tile_id=tile_id,
            sub_tile_index=idx,
            pixels=pixels[
                (idx // SUB_GRID) * SUB_TILE_PX : (idx // SUB_GRID + 1) * SUB_TILE_PX,
                (idx % SUB_GRID) * SUB_TILE_PX : (idx % SUB_GRID + 1) * SUB_TILE_PX,
            ],
        )
        for idx in range(SUB_GRID * SUB_GRID)
    ]
    min_side = min_diameter_px / SOURCE_TILE_PX  # in source-normalized units
    for i, box in enumerate(boxes):
        col = min(int(box.cx * SUB_GRID), SUB_GRID - 1)
        row = min(int(box.cy * SUB_GRID), SUB_GRID - 1)
        lo_x, lo_y = col / SUB_GRID, row / SUB_GRID
        hi_x, hi_y = (col + 1) / SUB_GRID, (row + 1) / SUB_GRID
        x1, y1, x2, y2 = box.corners
        x1, x2 = max(x1, lo_x), min(x2, hi_x)
        y1, y2 = max(y1, lo_y), min(y2, hi_y)
        if min(x2 - x1, y2 - y1) < min_side:
            continue  # clip-shrink drop, attributed by the pipeline
        local = Box.from_corners(
            (x1 - lo_x) * SUB_GRID,
            (y1 - lo_y) * SUB_GRID,
            (x2 - lo_x) * SUB_GRID,
            (y2 - lo_y) * SUB_GRID,
        )
        rec = records[row * SUB_GRID + col]
        rec.boxes.append(local)
        rec.source_indices.append(i)
    return records


# ---------------------------------------------------------------------------
# Grouped split
# ---------------------------------------------------------------------------

def grouped_split(
    tiles: Sequence[TileRecord],
    ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> SplitManifest:
    """Assign whole parent image ids to train/validation/test.

    Group counts follow largest-remainder apportionment of the shuffled id
    list, so no id can land in two splits.
    """
    ids = sorted({t.tile_id.image_id for t in tiles if t.tile_id is not None})
    return split_image_ids(ids, ratios, seed)


def split_image_ids(
    image_ids: Sequence[str],
    ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> SplitManifest:
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"ratios must sum to 1, got {ratios}")
    if any(r < 0 for r in ratios):
        raise DatasetError(f"ratios must be non-negative, got {ratios}")
    ids = sorted(set(image_ids))
    if len(ids) < 3:
        raise DatasetError(f"insufficient groups: need at least 3 distinct image ids, got {len(ids)}")

    rng = np.random.default_rng(seed)
    order = [ids[k] for k in rng.permutation(len(ids))]

    n = len(ids)
    exact = [r * n for r in ratios]
    counts = [int(math.floor(e)) for e in exact]
    remainders = sorted(range(3), key=lambda k: (-(exact[k] - counts[k]), k))
    for k in remainders[: n - sum(counts)]:
        counts[k] += 1
    # every split with positive ratio gets at least one group
    for k in range(3):
        while ratios[k] > 0 and counts[k] == 0:
            donor = max(range(3), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[k] += 1

    assignment: Dict[str, str] = {}
    start = 0
    for name, count in zip(SPLIT_NAMES, counts):
        for image_id in order[start : start + count]:
            assignment[image_id] = name
        start += count
    return SplitManifest(assignment=assignment, seed=seed, ratios=tuple(ratios))


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def read_annotations_csv(text: str) -> Dict[str, List[CircleAnnotation]]:
    """Parse `tile_name,cx,cy,r,accuracy` rows, grouped by tile, order kept."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DatasetError("empty annotation CSV") from None
    expected = ["tile_name", "cx", "cy", "r", "accuracy"]
    if [h.strip() for h in header] != expected:
        raise DatasetError(f"annotation CSV header must be {','.join(expected)}, got {header}")
    out: Dict[str, List[CircleAnnotation]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 5:
            raise DatasetError(f"line {lineno}: expected 5 fields, got {len(row)}")
        name = row[0].strip()
        parse_tile_id(name)
        try:
            cx, cy, r, acc = (float(v) for v in row[1:])
        except ValueError as exc:
            raise DatasetError(f"line {lineno}: non-numeric field in {row[1:]}") from exc
        out.setdefault(name, []).append(CircleAnnotation(cx, cy, r, acc))
    return out


def load_raster(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8)


def save_raster(path, pixels: np.ndarray) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").save(path)


def record_to_json(rec: TileRecord, extra: Optional[dict] = None) -> str:
    obj = {
        "tile": rec.tile_id.serialize() if rec.tile_id else "",
        "sub_tile": rec.sub_tile_index,
        "boxes": [[b.cx, b.cy, b.w, b.h] for b in rec.boxes],
    }
    if extra:
        obj.update(extra)
    return json.dumps(obj)


def record_from_json(line: str) -> TileRecord:
    try:
        obj = json.loads(line)
        tile_id = parse_tile_id(obj["tile"]) if obj.get("tile") else None
        boxes = [Box(*row) for row in obj["boxes"]]
        sub = int(obj["sub_tile"])
    except (KeyError, TypeError, ValueError, GeometryError) as exc:
        raise DatasetError(f"bad tile record line: {line!r}") from exc
    return TileRecord(tile_id=tile_id, sub_tile_index=sub, boxes=boxes)


def write_records_jsonl(records: Iterable[TileRecord], stream, extras=None) -> None:
    for i, rec in enumerate(records):
        extra = extras[i] if extras else None
        stream.write(record_to_json(rec, extra) + "\n")


def read_records_jsonl(stream) -> List[TileRecord]:
    return [record_from_json(line) for line in stream if line.strip()]


# ---------------------------------------------------------------------------
# Preprocessing pipeline
# ---------------------------------------------------------------------------

@dataclass
class AuditEntry:
    tile_name: str
    index: int
    reason: str


@dataclass
class PreprocessResult:
    records: List[TileRecord]
    audit: List[AuditEntry]
    kept: int
    excluded_tiles: List[str]


def preprocess_tile(
    tile_name: str,
    anns: Sequence[CircleAnnotation],
    pixels: np.ndarray,
    accuracy_threshold: float = ACCURACY_THRESHOLD_DEFAULT,
    black_level: int = BLACK_LEVEL_DEFAULT,
    max_black_fraction: float = MAX_BLACK_FRACTION_DEFAULT,
    min_diameter_px: int = MIN_DIAMETER_PX_DEFAULT,
) -> Tuple[List[TileRecord], List[AuditEntry]]:
    """Run the per-tile filter chain; every input index survives or is
    attributed to exactly one removal reason."""
    tile_id = parse_tile_id(tile_name)
    audit: List[AuditEntry] = []
    survivors: List[Tuple[int, CircleAnnotation]] = []
    for idx, ann in enumerate(anns):
        if ann.accuracy < accuracy_threshold:
            audit.append(AuditEntry(tile_name, idx, REASON_ACCURACY))
        elif 2.0 * ann.r * SOURCE_TILE_PX < min_diameter_px:
            audit.append(AuditEntry(tile_name, idx, REASON_SIZE))
        elif not black_pixel_filter(pixels, ann, black_level, max_black_fraction):
            audit.append(AuditEntry(tile_name, idx, REASON_BLACK))
        else:
            survivors.append((idx, ann))

    boxes = [circle_to_box(a.cx, a.cy, a.r) for _, a in survivors]
    records = tile_image(pixels, boxes, tile_id=tile_id, min_diameter_px=min_diameter_px)
    tiled = set()
    for rec in records:
        rec.source_indices = [survivors[k][0] for k in rec.source_indices]
        tiled.update(rec.source_indices)
    for idx, _ in survivors:
        if idx not in tiled:
            audit.append(AuditEntry(tile_name, idx, REASON_CLIP))
    return records, audit


def preprocess_corpus(
    annotations: Dict[str, List[CircleAnnotation]],
    raster_lookup,
    exclusions: Optional[Iterable[str]] = None,
    **thresholds,
) -> PreprocessResult:
    """Filter, tile and audit a whole corpus.

    raster_lookup maps tile_name -> 2048x2048 uint8 array; exclusions is
    the manual whole-image rejection list.
    """
    excluded = set(exclusions or ())
    records: List[TileRecord] = []
    audit: List[AuditEntry] = []
    applied_exclusions: List[str] = []
    for tile_name in sorted(annotations):
        anns = annotations[tile_name]
        if tile_name in excluded:
            applied_exclusions.append(tile_name)
            audit.extend(AuditEntry(tile_name, i, REASON_EXCLUDED) for i in range(len(anns)))
            continue
        pixels = raster_lookup(tile_name)
        recs, tile_audit = preprocess_tile(tile_name, anns, pixels, **thresholds)
        records.extend(recs)
        audit.extend(tile_audit)
    kept = sum(len(r.boxes) for r in records)
    return PreprocessResult(records=records, audit=audit, kept=kept, excluded_tiles=applied_exclusions)


def audit_csv(audit: Sequence[AuditEntry]) -> str:
    lines = ["tile_name,index,reason"]
    lines.extend(f"{e.tile_name},{e.index},{e.reason}" for e in audit)
    return "\n".join(lines) + "\n"


def manifest_to_json(manifest: SplitManifest) -> str:
    return json.dumps(
        {
            "seed": manifest.seed,
            "ratios": list(manifest.ratios),
            "assignment": dict(sorted(manifest.assignment.items())),
        },
        indent=2,
    )


def manifest_from_json(text: str) -> SplitManifest:
    try:
        obj = json.loads(text)
        return SplitManifest(
            assignment=dict(obj["assignment"]),
            seed=int(obj["seed"]),
            ratios=tuple(float(r) for r in obj["ratios"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"bad split manifest: {exc}") from exc
