"""Bounding-box geometry: normalized boxes, IoU/CIoU, circle conversion, NMS.

All boxes live in normalized image coordinates. The canonical representation
is center format (cx, cy, w, h) with corners constrained to the unit square.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, List, NamedTuple, Sequence, Tuple

import numpy as np

if TYPE_CHECKING:
    from .evaluation import Prediction

# Corners may overhang the unit square by at most this much before
# construction fails; smaller overhang is snapped back onto [0, 1].
CLIP_EPS = 1e-9
# Sides below this are rejected: they would blow up the aspect term and the
# enclosing-diagonal denominator.
MIN_SIDE = 1e-6

_4_OVER_PI2 = 4.0 / (math.pi * math.pi)


class GeometryError(ValueError):
    """Invalid box or annotation geometry."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in normalized center format.

    Construction validates the invariants: positive sides, corners inside
    the unit square (overhang up to CLIP_EPS is snapped), sides >= MIN_SIDE.
    """

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        cx, cy, w, h = float(self.cx), float(self.cy), float(self.w), float(self.h)
        if not all(math.isfinite(v) for v in (cx, cy, w, h)):
            raise GeometryError(f"non-finite box fields: {(cx, cy, w, h)}")
        if w <= 0.0 or h <= 0.0:
            raise GeometryError(f"zero-area box rejected: w={w}, h={h}")
        x1, y1, x2, y2 = cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0
        if x1 < -CLIP_EPS or y1 < -CLIP_EPS or x2 > 1.0 + CLIP_EPS or y2 > 1.0 + CLIP_EPS:
            raise GeometryError(
                f"box corners ({x1}, {y1})-({x2}, {y2}) outside the unit square"
            )
        if x1 < 0.0 or y1 < 0.0 or x2 > 1.0 or y2 > 1.0:
            # Snap the sub-epsilon overhang; fields are only rewritten when
            # clipping actually occurred so construction stays idempotent.
            x1, y1 = min(max(x1, 0.0), 1.0), min(max(y1, 0.0), 1.0)
            x2, y2 = min(max(x2, 0.0), 1.0), min(max(y2, 0.0), 1.0)
            cx, cy, w, h = (x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1
        if w < MIN_SIDE or h < MIN_SIDE:
            raise GeometryError(f"degenerate box: w={w}, h={h}")
        object.__setattr__(self, "cx", cx)
        object.__setattr__(self, "cy", cy)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "h", h)

    @property
    def corners(self) -> Tuple[float, float, float, float]:
        """(x1, y1, x2, y2) corner form."""
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


class CIoUValue(NamedTuple):
    """CIoU decomposition for one (pred, gt) pair."""

    iou: float
    ciou: float
    center_dist_sq: float
    enclosing_diag_sq: float
    v: float
    alpha: float


def circle_to_box(cx: float, cy: float, r: float) -> Box:
    """Convert a normalized circle to its bounding box, clipped to [0, 1].

    The un-clipped box is the square of side 2r; clipping at an image edge
    may leave a non-square box.
    """
    if not (r > 0.0):
        raise GeometryError(f"invalid annotation: radius must be positive, got {r}")
    if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0):
        raise GeometryError(f"invalid annotation: center ({cx}, {cy}) outside [0, 1]")
    x1, y1 = max(cx - r, 0.0), max(cy - r, 0.0)
    x2, y2 = min(cx + r, 1.0), min(cy + r, 1.0)
    return Box.from_corners(x1, y1, x2, y2)


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    """Stack boxes into an (n, 4) cxcywh float64 array."""
    items = [b.as_array() for b in boxes]
    if not items:
        return np.zeros((0, 4), dtype=np.float64)
    return np.stack(items)


def _corners(arr: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    cx, cy, w, h = arr[..., 0], arr[..., 1], arr[..., 2], arr[..., 3]
    return cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0


def iou_matrix(preds: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (n, 4) vs (m, 4) cxcywh arrays, result (n, m)."""
    preds = np.asarray(preds, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    px1, py1, px2, py2 = (c[:, None] for c in _corners(preds))
    gx1, gy1, gx2, gy2 = (c[None, :] for c in _corners(gts))
    iw = np.clip(np.minimum(px2, gx2) - np.maximum(px1, gx1), 0.0, None)
    ih = np.clip(np.minimum(py2, gy2) - np.maximum(py1, gy1), 0.0, None)
    inter = iw * ih
    # Areas from the same corner differences as the intersection, so that
    # identical boxes give exactly 1.
    area_p = (px2 - px1) * (py2 - py1)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = area_p + area_g - inter
    return inter / union


class CIoUMatrices(NamedTuple):
    iou: np.ndarray
    ciou: np.ndarray
    center_dist_sq: np.ndarray
    enclosing_diag_sq: np.ndarray
    v: np.ndarray
    alpha: np.ndarray


def ciou_matrix(preds: np.ndarray, gts: np.ndarray) -> CIoUMatrices:
    """Pairwise CIoU decomposition of (n, 4) vs (m, 4) cxcywh arrays.

    ciou = iou - rho^2 / c^2 - alpha * v, with alpha treated as a constant
    in gradients (it is recomputed here, never differentiated).
    """
    preds = np.asarray(preds, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    iou = iou_matrix(preds, gts)

    pcx, pcy = preds[:, 0][:, None], preds[:, 1][:, None]
    gcx, gcy = gts[:, 0][None, :], gts[:, 1][None, :]
    rho2 = (pcx - gcx) ** 2 + (pcy - gcy) ** 2

    px1, py1, px2, py2 = (c[:, None] for c in _corners(preds))
    gx1, gy1, gx2, gy2 = (c[None, :] for c in _corners(gts))
    cw = np.maximum(px2, gx2) - np.minimum(px1, gx1)
    ch = np.maximum(py2, gy2) - np.minimum(py1, gy1)
    c2 = cw * cw + ch * ch

    atan_p = np.arctan(preds[:, 2] / preds[:, 3])[:, None]
    atan_g = np.arctan(gts[:, 2] / gts[:, 3])[None, :]
    v = _4_OVER_PI2 * (atan_g - atan_p) ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        alpha = np.where(v > 0.0, v / ((1.0 - iou) + v), 0.0)

    ciou = iou - rho2 / c2 - alpha * v
    return CIoUMatrices(iou, ciou, rho2, c2, v, alpha)


def ciou_pairs(preds: np.ndarray, gts: np.ndarray) -> CIoUMatrices:
    """Elementwise CIoU of aligned (n, 4) arrays, each field shaped (n,)."""
    preds = np.asarray(preds, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    if preds.shape != gts.shape:
        raise GeometryError(f"paired arrays differ: {preds.shape} vs {gts.shape}")
    px1, py1, px2, py2 = _corners(preds)
    gx1, gy1, gx2, gy2 = _corners(gts)
    iw = np.clip(np.minimum(px2, gx2) - np.maximum(px1, gx1), 0.0, None)
    ih = np.clip(np.minimum(py2, gy2) - np.maximum(py1, gy1), 0.0, None)
    inter = iw * ih
    union = (px2 - px1) * (py2 - py1) + (gx2 - gx1) * (gy2 - gy1) - inter
    iou_v = inter / union
    rho2 = (preds[:, 0] - gts[:, 0]) ** 2 + (preds[:, 1] - gts[:, 1]) ** 2
    cw = np.maximum(px2, gx2) - np.minimum(px1, gx1)
    ch = np.maximum(py2, gy2) - np.minimum(py1, gy1)
    c2 = cw * cw + ch * ch
    v = _4_OVER_PI2 * (np.arctan(gts[:, 2] / gts[:, 3]) - np.arctan(preds[:, 2] / preds[:, 3])) ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        alpha = np.where(v > 0.0, v / ((1.0 - iou_v) + v), 0.0)
    return CIoUMatrices(iou_v, iou_v - rho2 / c2 - alpha * v, rho2, c2, v, alpha)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    return float(iou_matrix(a.as_array()[None, :], b.as_array()[None, :])[0, 0])


def ciou(pred: Box, gt: Box) -> CIoUValue:
    """Complete IoU of a predicted box against a ground-truth box."""
    m = ciou_matrix(pred.as_array()[None, :], gt.as_array()[None, :])
    return CIoUValue(*(float(field[0, 0]) for field in m))


def ciou_fixed_alpha(pred: Sequence[float], gt: Sequence[float], alpha: float) -> float:
    """CIoU with an externally supplied aspect trade-off weight.

    Gradient checks probe this with alpha frozen at the base point, since
    ciou_grad treats alpha as a constant; at the base point the value
    coincides with ciou().
    """
    pcx, pcy, pw, ph = (float(x) for x in pred)
    gcx, gcy, gw, gh = (float(x) for x in gt)
    px1, py1, px2, py2 = pcx - pw / 2, pcy - ph / 2, pcx + pw / 2, pcy + ph / 2
    gx1, gy1, gx2, gy2 = gcx - gw / 2, gcy - gh / 2, gcx + gw / 2, gcy + gh / 2
    iw = max(0.0, min(px2, gx2) - max(px1, gx1))
    ih = max(0.0, min(py2, gy2) - max(py1, gy1))
    inter = iw * ih
    union = (px2 - px1) * (py2 - py1) + (gx2 - gx1) * (gy2 - gy1) - inter
    iou_val = inter / union
    rho2 = (pcx - gcx) ** 2 + (pcy - gcy) ** 2
    cw = max(px2, gx2) - min(px1, gx1)
    chh = max(py2, gy2) - min(py1, gy1)
    c2 = cw * cw + chh * chh
    delta = math.atan(gw / gh) - math.atan(pw / ph)
    v = _4_OVER_PI2 * delta * delta
    return iou_val - rho2 / c2 - alpha * v


def ciou_grad(pred: Sequence[float], gt: Sequence[float]) -> np.ndarray:
    """d(ciou)/d(pred) for pred = (cx, cy, w, h), gt held fixed.

    alpha is gradient-stopped. Piecewise terms (intersection bounds,
    enclosing-box bounds) use their one-sided derivative; the function is
    differentiable wherever no bound is exactly tied.
    """
    pcx, pcy, pw, ph = (float(x) for x in pred)
    gcx, gcy, gw, gh = (float(x) for x in gt)
    px1, py1, px2, py2 = pcx - pw / 2, pcy - ph / 2, pcx + pw / 2, pcy + ph / 2
    gx1, gy1, gx2, gy2 = gcx - gw / 2, gcy - gh / 2, gcx + gw / 2, gcy + gh / 2

    # d corners / d (cx, cy, w, h), rows: x1, y1, x2, y2
    dcorner = np.array(
        [
            [1.0, 0.0, -0.5, 0.0],
            [0.0, 1.0, 0.0, -0.5],
            [1.0, 0.0, 0.5, 0.0],
            [0.0, 1.0, 0.0, 0.5],
        ]
    )

    iw = max(0.0, min(px2, gx2) - max(px1, gx1))
    ih = max(0.0, min(py2, gy2) - max(py1, gy1))
    inter = iw * ih
    area_p = pw * ph
    union = area_p + gw * gh - inter
    iou_val = inter / union

    d_iw = np.zeros(4)  # in corner coordinates (x1, y1, x2, y2)
    d_ih = np.zeros(4)
    if iw > 0.0:
        if px1 > gx1:
            d_iw[0] = -1.0
        if px2 < gx2:
            d_iw[2] = 1.0
    if ih > 0.0:
        if py1 > gy1:
            d_ih[1] = -1.0
        if py2 < gy2:
            d_ih[3] = 1.0
    d_inter = (d_iw * ih + d_ih * iw) @ dcorner
    d_area = np.array([0.0, 0.0, ph, pw])
    d_union = d_area - d_inter
    d_iou = (d_inter * union - inter * d_union) / (union * union)

    rho2 = (pcx - gcx) ** 2 + (pcy - gcy) ** 2
    d_rho2 = np.array([2 * (pcx - gcx), 2 * (pcy - gcy), 0.0, 0.0])

    cw = max(px2, gx2) - min(px1, gx1)
    chh = max(py2, gy2) - min(py1, gy1)
    c2 = cw * cw + chh * chh
    d_cw = np.zeros(4)
    d_chh = np.zeros(4)
    if px1 < gx1:
        d_cw[0] = -1.0
    if px2 > gx2:
        d_cw[2] = 1.0
    if py1 < gy1:
        d_chh[1] = -1.0
    if py2 > gy2:
        d_chh[3] = 1.0
    d_c2 = (2 * cw * d_cw + 2 * chh * d_chh) @ dcorner
    d_pen = (d_rho2 * c2 - rho2 * d_c2) / (c2 * c2)

    delta = math.atan(gw / gh) - math.atan(pw / ph)
    v = _4_OVER_PI2 * delta * delta
    denom = (1.0 - iou_val) + v
    alpha = v / denom if v > 0.0 else 0.0
    s = pw * pw + ph * ph
    d_v = np.array(
        [0.0, 0.0, -2.0 * _4_OVER_PI2 * delta * ph / s, 2.0 * _4_OVER_PI2 * delta * pw / s]
    )

    return d_iou - d_pen - alpha * d_v


def nms(preds: Sequence["Prediction"], iou_threshold: float) -> List["Prediction"]:
    """Greedy non-maximum suppression.

    Highest score wins; any box with IoU strictly above the threshold
    against a kept box is removed. Ties on score break toward the lower
    input index. Output is in keep order (score descending).
    """
    if not (0.0 <= iou_threshold <= 1.0):
        raise GeometryError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    if not preds:
        return []
    for p in preds:
        if not math.isfinite(p.score):
            raise GeometryError(f"non-finite prediction score: {p.score}")
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    arr = boxes_to_array([p.box for p in preds])
    kept: List[int] = []
    for i in order:
        if kept:
            ious = iou_matrix(arr[i][None, :], arr[kept])[0]
            if np.any(ious > iou_threshold):
                continue
        kept.append(i)
    return [preds[i] for i in kept]
