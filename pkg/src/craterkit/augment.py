"""Joint raster/box augmentation: the five default sub-policies.

Geometric ops warp the raster by inverse-mapped bilinear sampling with
zero fill and transform boxes through corner math (axis-aligned hull,
clip, survival rule). Photometric ops leave boxes untouched. Everything
is deterministic given the seed.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import MIN_SIDE, Box

# A clipped box survives only if it keeps at least this fraction of its
# transformed (pre-clip) area.
SURVIVAL_AREA_FRACTION = 0.25


class AugmentError(ValueError):
    """Invalid augmentation input or policy table."""


# ---------------------------------------------------------------------------
# Affine helpers (normalized coordinates, center (0.5, 0.5))
# ---------------------------------------------------------------------------

def rotation_matrix(degrees: float) -> np.ndarray:
    """Forward rotation about the image center; y axis points down."""
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    return _about_center(np.array([[c, -s], [s, c]]))


def shear_y_matrix(degrees: float) -> np.ndarray:
    """Forward vertical shear about the image center."""
    return _about_center(np.array([[1.0, 0.0], [math.tan(math.radians(degrees)), 1.0]]))


def scale_matrix(factor: float) -> np.ndarray:
    """Forward uniform scaling about the image center."""
    if factor <= 0:
        raise AugmentError(f"scale factor must be positive, got {factor}")
    return _about_center(np.array([[factor, 0.0], [0.0, factor]]))


def translation_matrix(dx: float, dy: float) -> np.ndarray:
    return np.array([[1.0, 0.0, dx], [0.0, 1.0, dy]])


def _about_center(linear: np.ndarray) -> np.ndarray:
    center = np.array([0.5, 0.5])
    offset = center - linear @ center
    return np.hstack([linear, offset[:, None]])


def invert_affine(m: np.ndarray) -> np.ndarray:
    inv = np.linalg.inv(m[:, :2])
    return np.hstack([inv, (-inv @ m[:, 2])[:, None]])


def transform_corners(m: np.ndarray, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return pts @ m[:, :2].T + m[:, 2]


def box_corners_array(box: Box) -> np.ndarray:
    x1, y1, x2, y2 = box.corners
    return np.array([[x1, y1], [x2, y1], [x2, y2], [x1, y2]])


def hull_of_points(points: np.ndarray) -> Tuple[float, float, float, float]:
    xs, ys = points[:, 0], points[:, 1]
    return float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max())


# ---------------------------------------------------------------------------
# Raster warping
# ---------------------------------------------------------------------------

def warp_raster(pixels: np.ndarray, forward: np.ndarray) -> np.ndarray:
    """Apply a forward affine to an 8-bit raster.

    Output pixels are inverse-mapped into the source and sampled
    bilinearly; samples outside the source read as zero.
    """
    pixels = np.asarray(pixels)
    h, w = pixels.shape
    inv = invert_affine(forward)
    ys, xs = np.mgrid[0:h, 0:w]
    xn = (xs + 0.5) / w
    yn = (ys + 0.5) / h
    sx = inv[0, 0] * xn + inv[0, 1] * yn + inv[0, 2]
    sy = inv[1, 0] * xn + inv[1, 1] * yn + inv[1, 2]
    return _bilinear(pixels, sx * w - 0.5, sy * h - 0.5)


def _bilinear(pixels: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Sample real-valued pixel coords; out-of-bounds neighbors read zero."""
    h, w = pixels.shape
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    wx = px - x0
    wy = py - y0
    src = pixels.astype(np.float64)
    acc = np.zeros(px.shape, dtype=np.float64)
    for dy_, wy_ in ((0, 1.0 - wy), (1, wy)):
        for dx_, wx_ in ((0, 1.0 - wx), (1, wx)):
            xi = x0 + dx_
            yi = y0 + dy_
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            sample = np.where(valid, src[yi.clip(0, h - 1), xi.clip(0, w - 1)], 0.0)
            acc += wx_ * wy_ * sample
    return np.rint(acc).clip(0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Box transforms
# ---------------------------------------------------------------------------

def _clip_and_filter(
    hulls: Sequence[Tuple[float, float, float, float]],
    reference_areas: Sequence[float],
) -> Tuple[List[Box], List[int]]:
    """Clip hulls to the unit square, dropping low-survival boxes.

    Returns surviving boxes and the indices of dropped inputs.
    """
    kept: List[Box] = []
    dropped: List[int] = []
    for i, ((x1, y1, x2, y2), ref_area) in enumerate(zip(hulls, reference_areas)):
        cx1, cy1 = max(x1, 0.0), max(y1, 0.0)
        cx2, cy2 = min(x2, 1.0), min(y2, 1.0)
        cw, ch = cx2 - cx1, cy2 - cy1
        if cw < MIN_SIDE or ch < MIN_SIDE or cw * ch < SURVIVAL_AREA_FRACTION * ref_area:
            dropped.append(i)
            continue
        kept.append(Box.from_corners(cx1, cy1, cx2, cy2))
    return kept, dropped


def _affine_boxes(boxes: Sequence[Box], forward: np.ndarray):
    hulls = []
    refs = []
    for b in boxes:
        pts = transform_corners(forward, box_corners_array(b))
        x1, y1, x2, y2 = hull_of_points(pts)
        hulls.append((x1, y1, x2, y2))
        refs.append((x2 - x1) * (y2 - y1))
    return _clip_and_filter(hulls, refs)


def _identity(pixels: np.ndarray, boxes: Sequence[Box]):
    return np.asarray(pixels).copy(), list(boxes), []


def translate_x(pixels: np.ndarray, boxes: Sequence[Box], magnitude: float):
    """Horizontal shift by magnitude * width with zero fill.

    Positive magnitude moves content toward the left edge (a box at
    cx = 0.25 fully exits under magnitude 0.5).
    """
    if abs(magnitude) > 0.5:
        raise AugmentError(f"translate magnitude {magnitude} outside [-0.5, 0.5]")
    if magnitude == 0.0:
        return _identity(pixels, boxes)
    m = translation_matrix(-magnitude, 0.0)
    kept, dropped = _affine_boxes(boxes, m)
    return warp_raster(pixels, m), kept, dropped


def rotate(pixels: np.ndarray, boxes: Sequence[Box], degrees: float):
    """Rotation about the image center; boxes become corner-rotated hulls."""
    if not math.isfinite(degrees):
        raise AugmentError(f"non-finite rotation angle: {degrees}")
    if degrees == 0.0:
        return _identity(pixels, boxes)
    m = rotation_matrix(degrees)
    kept, dropped = _affine_boxes(boxes, m)
    return warp_raster(pixels, m), kept, dropped


def shear_y(pixels: np.ndarray, boxes: Sequence[Box], degrees: float):
    """Vertical shear about the image center."""
    if not math.isfinite(degrees):
        raise AugmentError(f"non-finite shear angle: {degrees}")
    if degrees == 0.0:
        return _identity(pixels, boxes)
    m = shear_y_matrix(degrees)
    kept, dropped = _affine_boxes(boxes, m)
    return warp_raster(pixels, m), kept, dropped


def scale(pixels: np.ndarray, boxes: Sequence[Box], offset: float):
    """Uniform scaling about the center by 1 + offset.

    Scaled-down boxes may fall below the ingestion minimum size; they are
    kept deliberately (the minimum applies at ingestion, not here).
    """
    factor = 1.0 + offset
    if factor <= 0:
        raise AugmentError(f"scale offset {offset} yields non-positive factor")
    if offset == 0.0:
        return _identity(pixels, boxes)
    m = scale_matrix(factor)
    kept, dropped = _affine_boxes(boxes, m)
    return warp_raster(pixels, m), kept, dropped


def bbox_only_rotate(pixels: np.ndarray, boxes: Sequence[Box], degrees: float):
    """Rotate pixel content inside each box about its own center.

    Source samples are clamped to the box rectangle, pixels outside all
    boxes stay untouched and box coordinates never change. Overlapping
    boxes are processed in input order, later ones reading already
    rotated content.
    """
    if not math.isfinite(degrees):
        raise AugmentError(f"non-finite rotation angle: {degrees}")
    out = np.asarray(pixels).copy()
    if degrees == 0.0 or not boxes:
        return out, list(boxes), []
    h, w = out.shape
    t = math.radians(degrees)
    c, s = math.cos(t), math.sin(t)
    for b in boxes:
        x1, y1, x2, y2 = b.corners
        ix1, iy1 = max(int(math.floor(x1 * w)), 0), max(int(math.floor(y1 * h)), 0)
        ix2, iy2 = min(int(math.ceil(x2 * w)), w), min(int(math.ceil(y2 * h)), h)
        if ix2 <= ix1 or iy2 <= iy1:
            continue
        ys, xs = np.mgrid[iy1:iy2, ix1:ix2]
        ccx, ccy = b.cx * w - 0.5, b.cy * h - 0.5
        dx = xs - ccx
        dy = ys - ccy
        # inverse rotation of the sampling grid about the box center
        sx = ccx + c * dx + s * dy
        sy = ccy - s * dx + c * dy
        sx = sx.clip(ix1, ix2 - 1)
        sy = sy.clip(iy1, iy2 - 1)
        out[iy1:iy2, ix1:ix2] = _bilinear(out, sx, sy)
    return out, list(boxes), []


def equalize(pixels: np.ndarray) -> np.ndarray:
    """Standard 256-bin histogram equalization; constant rasters pass through."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    hist = np.bincount(pixels.ravel(), minlength=256)
    cdf = hist.cumsum()
    occupied = np.nonzero(hist)[0]
    if occupied.size <= 1:
        return pixels.copy()
    cdf_min = cdf[occupied[0]]
    denom = cdf[-1] - cdf_min
    lut = np.rint((cdf - cdf_min) / denom * 255.0).clip(0, 255).astype(np.uint8)
    return lut[pixels]


def color_jitter(
    pixels: np.ndarray,
    rng: np.random.Generator,
    brightness: float = 0.6,
    contrast: float = 0.5,
    saturation: float = 0.5,
    hue: float = 0.1,
) -> Tuple[np.ndarray, Dict[str, Optional[float]]]:
    """Grayscale jitter: contrast about the mean, then brightness.

    Saturation and hue are declared no-ops on single-channel data; the
    returned factor record keeps them visible to audits.
    """
    b_factor = float(rng.uniform(1.0 - brightness, 1.0 + brightness))
    c_factor = float(rng.uniform(1.0 - contrast, 1.0 + contrast))
    src = np.asarray(pixels, dtype=np.float64)
    mean = src.mean()
    out = np.clip(c_factor * (src - mean) + mean, 0.0, 255.0)
    out = np.clip(out * b_factor, 0.0, 255.0)
    factors = {
        "brightness": b_factor,
        "contrast": c_factor,
        "saturation": None,
        "hue": None,
    }
    return np.rint(out).astype(np.uint8), factors


# ---------------------------------------------------------------------------
# Policy registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PolicyOp:
    name: str
    probability: float = 0.0
    magnitude: Optional[Tuple[float, float]] = None
    jitter: Optional[Tuple[float, float, float, float]] = None

    @property
    def is_noop(self) -> bool:
        return self.name == "none"


@dataclass(frozen=True)
class SubPolicy:
    op1: PolicyOp
    op2: PolicyOp


OP_NAMES = {
    "translate_x",
    "equalize",
    "bbox_only_rotate",
    "scale",
    "shear_y",
    "rotate",
    "color_jitter",
    "none",
}


def default_policies() -> List[SubPolicy]:
    return [
        SubPolicy(
            PolicyOp("translate_x", 0.6, (-0.4, 0.4)),
            PolicyOp("equalize", 0.8),
        ),
        SubPolicy(
            PolicyOp("bbox_only_rotate", 0.2, (-180.0, 180.0)),
            PolicyOp("scale", 1.0, (-0.3, 0.3)),
        ),
        SubPolicy(
            PolicyOp("shear_y", 0.6, (-10.0, 10.0)),
            PolicyOp("bbox_only_rotate", 0.6, (-180.0, 180.0)),
        ),
        SubPolicy(
            PolicyOp("rotate", 0.6, (-30.0, 30.0)),
            PolicyOp("color_jitter", 1.0, jitter=(0.6, 0.5, 0.5, 0.1)),
        ),
        SubPolicy(PolicyOp("none"), PolicyOp("none")),
    ]


def render_policies(policies: Sequence[SubPolicy]) -> str:
    """Plain-text table, one sub-policy per row, editable without code."""
    lines = ["# sub-policy | op1 | p1 | magnitude1 | op2 | p2 | magnitude2"]
    for i, sp in enumerate(policies, start=1):
        cols = [str(i)]
        for op in (sp.op1, sp.op2):
            if op.is_noop:
                cols += ["none", "-", "-"]
            else:
                if op.jitter is not None:
                    mag = ",".join(f"{v:g}" for v in op.jitter)
                elif op.magnitude is not None:
                    mag = f"{op.magnitude[0]:g},{op.magnitude[1]:g}"
                else:
                    mag = "-"
                cols += [op.name, f"{op.probability:g}", mag]
        lines.append(" | ".join(cols))
    return "\n".join(lines) + "\n"


def _parse_op(name: str, prob: str, mag: str, lineno: int) -> PolicyOp:
    name = name.strip()
    if name not in OP_NAMES:
        raise AugmentError(f"line {lineno}: unknown operation {name!r}")
    if name == "none":
        return PolicyOp("none")
    try:
        p = float(prob)
    except ValueError:
        raise AugmentError(f"line {lineno}: bad probability {prob!r}") from None
    if not (0.0 <= p <= 1.0):
        raise AugmentError(f"line {lineno}: probability {p} outside [0, 1]")
    mag = mag.strip()
    if mag == "-":
        return PolicyOp(name, p)
    parts = [float(v) for v in mag.split(",")]
    if name == "color_jitter":
        if len(parts) != 4:
            raise AugmentError(f"line {lineno}: color_jitter needs 4 strengths")
        return PolicyOp(name, p, jitter=tuple(parts))
    if len(parts) != 2 or parts[0] > parts[1]:
        raise AugmentError(f"line {lineno}: bad magnitude range {mag!r}")
    return PolicyOp(name, p, (parts[0], parts[1]))


def parse_policies(text: str) -> List[SubPolicy]:
    policies = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        cols = [c.strip() for c in line.split("|")]
        if len(cols) != 7:
            raise AugmentError(f"line {lineno}: expected 7 columns, got {len(cols)}")
        op1 = _parse_op(cols[1], cols[2], cols[3], lineno)
        op2 = _parse_op(cols[4], cols[5], cols[6], lineno)
        policies.append(SubPolicy(op1, op2))
    validate_policies(policies)
    return policies


def validate_policies(policies: Sequence[SubPolicy]) -> None:
    if len(policies) != 5:
        raise AugmentError(f"registry must hold exactly 5 sub-policies, got {len(policies)}")
    last = policies[-1]
    if not (last.op1.is_noop and last.op2.is_noop):
        raise AugmentError("sub-policy 5 must be the double no-op")


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

@dataclass
class AugmentedSample:
    pixels: np.ndarray
    boxes: List[Box]
    policy_index: int  # 0-based
    applied_ops: List[Dict] = field(default_factory=list)
    dropped_boxes: List[Dict] = field(default_factory=list)

    def log_json(self) -> str:
        return json.dumps(
            {
                "policy": self.policy_index + 1,
                "ops": self.applied_ops,
                "dropped_boxes": self.dropped_boxes,
            }
        )


def _apply_op(
    op: PolicyOp, pixels: np.ndarray, boxes: List[Box], rng: np.random.Generator, sample: AugmentedSample
):
    if op.name == "equalize":
        sample.applied_ops.append({"name": "equalize", "magnitude": None})
        return equalize(pixels), boxes
    if op.name == "color_jitter":
        br, co, sa, hu = op.jitter if op.jitter else (0.6, 0.5, 0.5, 0.1)
        out, factors = color_jitter(pixels, rng, br, co, sa, hu)
        sample.applied_ops.append({"name": "color_jitter", "magnitude": factors})
        return out, boxes
    magnitude = float(rng.uniform(*op.magnitude)) if op.magnitude else 0.0
    func = {
        "translate_x": translate_x,
        "rotate": rotate,
        "shear_y": shear_y,
        "scale": scale,
        "bbox_only_rotate": bbox_only_rotate,
    }[op.name]
    out, kept, dropped = func(pixels, boxes, magnitude)
    sample.applied_ops.append({"name": op.name, "magnitude": magnitude})
    for i in dropped:
        b = boxes[i]
        sample.dropped_boxes.append(
            {"op": op.name, "box": [b.cx, b.cy, b.w, b.h]}
        )
    return out, kept


def sample_and_apply(
    pixels: np.ndarray,
    boxes: Sequence[Box],
    rng_seed: int,
    policies: Optional[Sequence[SubPolicy]] = None,
) -> AugmentedSample:
    """Pick one sub-policy uniformly and run its two ops in order.

    Each op activates with its listed probability; active geometric ops
    draw a magnitude uniformly from their range. Fully deterministic for
    a given seed.
    """
    policies = list(policies) if policies is not None else default_policies()
    validate_policies(policies)
    rng = np.random.default_rng(rng_seed)
    idx = int(rng.integers(0, len(policies)))
    sp = policies[idx]
    sample = AugmentedSample(
        pixels=np.asarray(pixels, dtype=np.uint8).copy(),
        boxes=list(boxes),
        policy_index=idx,
    )
    for op in (sp.op1, sp.op2):
        if op.is_noop:
            continue
        if rng.random() >= op.probability:
            continue
        sample.pixels, sample.boxes = _apply_op(op, sample.pixels, sample.boxes, rng, sample)
    return sample


def derive_seed(base_seed: int, tile_name: str, sub_tile: int) -> int:
    """Stable per-sample seed from the base seed and the tile identity."""
    import hashlib

    digest = hashlib.sha256(f"{base_seed}:{tile_name}#{sub_tile}".encode()).digest()
    return int.from_bytes(digest[:8], "big")
