import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from craterkit.geometry import (
    ciou_fixed_alpha,
    Box,
    GeometryError,
    boxes_to_array,
    ciou,
    ciou_grad,
    ciou_matrix,
    circle_to_box,
    iou,
    iou_matrix,
    nms,
)
from craterkit.evaluation import Prediction

from conftest import random_box


# ---------------------------------------------------------------------------
# Independent oracles
# ---------------------------------------------------------------------------

def iou_rasterized(a: Box, b: Box, grid: int = 10_000) -> float:
    """Count grid-cell centers inside each box; ratio approximates IoU."""
    xs = (np.arange(grid) + 0.5) / grid
    ax1, ay1, ax2, ay2 = a.corners
    bx1, by1, bx2, by2 = b.corners
    in_ax = (xs >= ax1) & (xs <= ax2)
    in_ay = (xs >= ay1) & (xs <= ay2)
    in_bx = (xs >= bx1) & (xs <= bx2)
    in_by = (xs >= by1) & (xs <= by2)
    na = int(in_ax.sum()) * int(in_ay.sum())
    nb = int(in_bx.sum()) * int(in_by.sum())
    ni = int((in_ax & in_bx).sum()) * int((in_ay & in_by).sum())
    return ni / (na + nb - ni)


def ciou_scalar_oracle(pred: Box, gt: Box) -> float:
    """Plain-math CIoU, written independently of the production kernel."""
    px1, py1, px2, py2 = pred.corners
    gx1, gy1, gx2, gy2 = gt.corners
    iw = max(0.0, min(px2, gx2) - max(px1, gx1))
    ih = max(0.0, min(py2, gy2) - max(py1, gy1))
    inter = iw * ih
    union = pred.w * pred.h + gt.w * gt.h - inter
    iou_val = inter / union
    rho2 = (pred.cx - gt.cx) ** 2 + (pred.cy - gt.cy) ** 2
    cw = max(px2, gx2) - min(px1, gx1)
    ch = max(py2, gy2) - min(py1, gy1)
    c2 = cw * cw + ch * ch
    v = (4.0 / math.pi**2) * (math.atan(gt.w / gt.h) - math.atan(pred.w / pred.h)) ** 2
    alpha = v / ((1.0 - iou_val) + v) if v > 0 else 0.0
    return iou_val - rho2 / c2 - alpha * v


def nms_greedy_oracle(preds, threshold):
    """Greedy suppression spelled out pairwise, independent of nms()."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    kept = []
    for i in order:
        if all(iou(preds[i].box, preds[k].box) <= threshold for k in kept):
            kept.append(i)
    return [preds[i] for i in kept]


# ---------------------------------------------------------------------------
# Box
# ---------------------------------------------------------------------------

def test_box_corner_roundtrip():
    b = Box(0.3, 0.4, 0.2, 0.1)
    again = Box.from_corners(*b.corners)
    assert abs(again.cx - b.cx) < 1e-12
    assert abs(again.cy - b.cy) < 1e-12
    assert abs(again.w - b.w) < 1e-12
    assert abs(again.h - b.h) < 1e-12


def test_box_rejects_zero_area():
    with pytest.raises(GeometryError):
        Box(0.5, 0.5, 0.0, 0.1)
    with pytest.raises(GeometryError):
        Box(0.5, 0.5, 0.1, -0.2)


def test_box_rejects_out_of_range():
    with pytest.raises(GeometryError):
        Box(0.05, 0.5, 0.2, 0.2)  # left corner at -0.05


def test_box_snaps_tiny_overhang():
    b = Box(0.1, 0.5, 0.2 + 1e-10, 0.2)
    x1, _, _, _ = b.corners
    assert x1 >= 0.0


# ---------------------------------------------------------------------------
# circle_to_box
# ---------------------------------------------------------------------------

def test_circle_centered():
    b = circle_to_box(0.5, 0.5, 0.25)
    assert b.corners == pytest.approx((0.25, 0.25, 0.75, 0.75), abs=1e-12)
    assert b.w == pytest.approx(b.h)


def test_circle_clipped_at_edge():
    b = circle_to_box(0.0, 0.5, 0.1)
    assert b.corners == pytest.approx((0.0, 0.4, 0.1, 0.6), abs=1e-12)
    assert b.w != pytest.approx(b.h)  # clipping broke squareness


def test_circle_minimum_crater_size():
    # 8 px diameter at the 2048 px source scale
    b = circle_to_box(0.5, 0.5, 4 / 2048)
    assert b.w * 2048 == pytest.approx(8.0, abs=1e-9)
    assert b.h * 2048 == pytest.approx(8.0, abs=1e-9)


def test_circle_rejects_nonpositive_radius():
    with pytest.raises(GeometryError):
        circle_to_box(0.5, 0.5, 0.0)
    with pytest.raises(GeometryError):
        circle_to_box(0.5, 0.5, -0.1)


# ---------------------------------------------------------------------------
# IoU
# ---------------------------------------------------------------------------

def test_iou_identity():
    b = Box(0.4, 0.6, 0.3, 0.2)
    assert iou(b, b) == 1.0


def test_iou_disjoint():
    a = Box.from_corners(0.0, 0.0, 0.2, 0.2)
    b = Box.from_corners(0.5, 0.5, 0.9, 0.9)
    assert iou(a, b) == 0.0


def test_iou_known_overlap():
    a = Box.from_corners(0.0, 0.0, 0.2, 0.2)
    b = Box.from_corners(0.1, 0.1, 0.3, 0.3)
    val = iou(a, b)
    assert val == pytest.approx(1 / 7, abs=1e-12)
    assert val == pytest.approx(iou_rasterized(a, b), abs=1e-3)


def test_iou_symmetry_random(rng):
    for _ in range(200):
        a, b = random_box(rng), random_box(rng)
        assert iou(a, b) == iou(b, a)


# ---------------------------------------------------------------------------
# CIoU
# ---------------------------------------------------------------------------

def test_ciou_identity():
    b = Box(0.3, 0.3, 0.25, 0.15)
    val = ciou(b, b)
    assert val.ciou == 1.0
    assert val.iou == 1.0
    assert val.v == 0.0
    assert val.center_dist_sq == 0.0


def test_ciou_concentric_same_aspect():
    outer = Box(0.5, 0.5, 0.4, 0.2)
    inner = Box(0.5, 0.5, 0.2, 0.1)
    val = ciou(inner, outer)
    assert val.v == pytest.approx(0.0, abs=1e-15)
    assert val.ciou == pytest.approx(val.iou, abs=1e-15)


def test_ciou_known_pair_matches_oracle():
    a = Box.from_corners(0.0, 0.0, 0.2, 0.2)
    b = Box.from_corners(0.1, 0.1, 0.3, 0.3)
    val = ciou(a, b)
    # iou = 1/7, rho^2 = 0.02, c^2 = 0.18, v = 0 (both square)
    assert val.ciou == pytest.approx(2 / 63, abs=1e-12)
    assert val.ciou == pytest.approx(ciou_scalar_oracle(a, b), abs=1e-9)


def test_ciou_random_pairs_match_oracle(rng):
    for _ in range(500):
        a, b = random_box(rng), random_box(rng)
        val = ciou(a, b)
        assert val.ciou == pytest.approx(ciou_scalar_oracle(a, b), abs=1e-9)
        assert val.ciou <= val.iou + 1e-15
        assert -1.0 < val.ciou <= 1.0
        assert val.alpha >= 0.0 and val.v >= 0.0


def test_ciou_matrix_matches_scalar(rng):
    preds = [random_box(rng) for _ in range(7)]
    gts = [random_box(rng) for _ in range(5)]
    mat = ciou_matrix(boxes_to_array(preds), boxes_to_array(gts))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            assert mat.ciou[i, j] == ciou(p, g).ciou  # bit-exact, same kernel


def test_scale_invariance_power_of_two(rng):
    for s in (0.5, 0.25, 0.125):
        for _ in range(50):
            a, b = random_box(rng), random_box(rng)
            a2 = Box(a.cx * s, a.cy * s, a.w * s, a.h * s)
            b2 = Box(b.cx * s, b.cy * s, b.w * s, b.h * s)
            assert iou(a2, b2) == iou(a, b)
            assert ciou(a2, b2).ciou == pytest.approx(ciou(a, b).ciou, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(
    s=st.floats(min_value=0.1, max_value=1.0),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_scale_invariance_any_scale(s, seed):
    r = np.random.default_rng(seed)
    a, b = random_box(r), random_box(r)
    a2 = Box(a.cx * s, a.cy * s, a.w * s, a.h * s)
    b2 = Box(b.cx * s, b.cy * s, b.w * s, b.h * s)
    assert iou(a2, b2) == pytest.approx(iou(a, b), abs=1e-12)
    assert ciou(a2, b2).ciou == pytest.approx(ciou(a, b).ciou, abs=1e-12)


# ---------------------------------------------------------------------------
# CIoU gradient (finite differences)
# ---------------------------------------------------------------------------

def _away_from_kinks(p: Box, g: Box, margin: float = 1e-3) -> bool:
    px1, py1, px2, py2 = p.corners
    gx1, gy1, gx2, gy2 = g.corners
    gaps = [px1 - gx1, px2 - gx2, py1 - gy1, py2 - gy2]
    iw = min(px2, gx2) - max(px1, gx1)
    ih = min(py2, gy2) - max(py1, gy1)
    return all(abs(v) > margin for v in gaps) and abs(iw) > margin and abs(ih) > margin


def test_ciou_fixed_alpha_coincides_at_base_point(rng):
    for _ in range(100):
        p, g = random_box(rng), random_box(rng)
        val = ciou(p, g)
        fixed = ciou_fixed_alpha(p.as_array(), g.as_array(), val.alpha)
        assert fixed == pytest.approx(val.ciou, abs=1e-12)


def test_ciou_grad_matches_finite_differences(rng):
    # alpha is gradient-stopped, so the FD probe holds it at the base value
    checked = 0
    while checked < 50:
        p, g = random_box(rng), random_box(rng)
        if not _away_from_kinks(p, g):
            continue
        checked += 1
        p0 = p.as_array()
        g0 = g.as_array()
        alpha0 = ciou(p, g).alpha
        analytic = ciou_grad(p0, g0)
        h = 1e-6
        for k in range(4):
            plus, minus = p0.copy(), p0.copy()
            plus[k] += h
            minus[k] -= h
            fd = (
                ciou_fixed_alpha(plus, g0, alpha0) - ciou_fixed_alpha(minus, g0, alpha0)
            ) / (2 * h)
            denom = max(abs(analytic[k]), abs(fd), 1e-8)
            assert abs(analytic[k] - fd) / denom < 1e-4, (p, g, k)


# ---------------------------------------------------------------------------
# NMS
# ---------------------------------------------------------------------------

def _pred(box, score):
    return Prediction(box=box, score=score)


def test_nms_single_prediction():
    p = _pred(Box(0.5, 0.5, 0.2, 0.2), 0.7)
    assert nms([p], 0.12) == [p]


def test_nms_identical_boxes_collapse():
    b = Box(0.5, 0.5, 0.2, 0.2)
    keep = nms([_pred(b, 0.9), _pred(b, 0.8)], 0.12)
    assert len(keep) == 1
    assert keep[0].score == 0.9


def test_nms_empty():
    assert nms([], 0.12) == []


def test_nms_tie_breaks_to_lower_index():
    b = Box(0.5, 0.5, 0.2, 0.2)
    p0, p1 = _pred(b, 0.5), _pred(b, 0.5)
    keep = nms([p0, p1], 0.12)
    assert keep == [p0]


def test_nms_matches_bruteforce_oracle(rng):
    for _ in range(100):
        preds = [_pred(random_box(rng), float(rng.uniform(0, 1))) for _ in range(5)]
        got = nms(preds, 0.12)
        want = nms_greedy_oracle(preds, 0.12)
        assert [id(p) for p in got] == [id(p) for p in want]


def test_nms_idempotent(rng):
    for _ in range(50):
        preds = [_pred(random_box(rng), float(rng.uniform(0, 1))) for _ in range(8)]
        once = nms(preds, 0.3)
        twice = nms(once, 0.3)
        assert [id(p) for p in once] == [id(p) for p in twice]


def test_nms_rejects_bad_threshold():
    with pytest.raises(GeometryError):
        nms([_pred(Box(0.5, 0.5, 0.1, 0.1), 1.0)], 1.5)


def test_iou_matrix_shapes(rng):
    p = boxes_to_array([random_box(rng) for _ in range(3)])
    g = boxes_to_array([random_box(rng) for _ in range(4)])
    assert iou_matrix(p, g).shape == (3, 4)
    assert ciou_matrix(p, g).ciou.shape == (3, 4)
