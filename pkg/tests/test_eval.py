import itertools

import numpy as np
import pytest

from craterkit.evaluation import (
    EvaluationError,
    Prediction,
    confusion,
    evaluate_detections,
    make_report,
    precision,
    recall,
    render_csv,
    render_table,
    result_from_counts,
    result_from_ratios,
)
from craterkit.geometry import Box

from conftest import random_box


def _pred(box, score=0.9, emb=None):
    return Prediction(box=box, score=score, embedding=emb)


def max_tp_oracle(pred_boxes, gt_boxes, tp_iou):
    """Exhaustive max one-to-one matching with IoU strictly above threshold."""
    from craterkit.geometry import iou

    best = 0
    n, m = len(pred_boxes), len(gt_boxes)
    for k in range(min(n, m), -1, -1):
        for pred_subset in itertools.permutations(range(n), k):
            for gt_subset in itertools.combinations(range(m), k):
                ok = all(
                    iou(pred_boxes[pi], gt_boxes[gi]) > tp_iou
                    for pi, gi in zip(pred_subset, gt_subset)
                )
                if ok:
                    return k
    return best


# ---------------------------------------------------------------------------
# confusion
# ---------------------------------------------------------------------------

def test_confusion_exact_copies():
    gts = [Box(0.2, 0.2, 0.1, 0.1), Box(0.7, 0.7, 0.2, 0.2)]
    preds = [_pred(b, 0.8) for b in gts]
    assert confusion(preds, gts) == (2, 0, 0)


def test_confusion_iou_exactly_at_threshold_is_fp():
    # two aligned boxes sharing one edge overlap: iou(w overlap fraction)
    # build a pair with iou exactly 0.30: widths equal, offset so that
    # inter/union = 0.3 -> inter = 0.3 * (2*a - inter) -> overlap fraction
    # f satisfies f / (2 - f) = 0.3 -> f = 0.6 / 1.3
    f = 0.6 / 1.3
    w = 0.2
    gt = Box(0.5, 0.5, w, w)
    dx = w * (1 - f)
    pred = Box(0.5 + dx, 0.5, w, w)
    from craterkit.geometry import iou

    assert iou(pred, gt) == pytest.approx(0.30, abs=1e-12)
    # strict inequality: exact threshold does not count
    tp, fp, fn = confusion([_pred(pred)], [gt], tp_iou=iou(pred, gt))
    assert (tp, fp, fn) == (0, 1, 1)


def test_confusion_score_threshold_discards():
    gt = Box(0.5, 0.5, 0.2, 0.2)
    preds = [_pred(gt, 0.05), _pred(gt, 0.9)]
    tp, fp, fn = confusion(preds, [gt], score_threshold=0.1)
    assert (tp, fp, fn) == (1, 0, 0)


def test_confusion_one_to_one_claiming():
    gt = Box(0.5, 0.5, 0.2, 0.2)
    preds = [_pred(gt, 0.9), _pred(gt, 0.8)]  # duplicate detection
    tp, fp, fn = confusion(preds, [gt])
    assert (tp, fp, fn) == (1, 1, 0)


def test_confusion_matches_exhaustive_on_fixture():
    # 4 preds / 3 gts with clean separations: greedy equals optimal
    gts = [Box(0.2, 0.2, 0.15, 0.15), Box(0.55, 0.55, 0.15, 0.15), Box(0.85, 0.2, 0.12, 0.12)]
    preds = [
        _pred(Box(0.21, 0.2, 0.15, 0.15), 0.95),
        _pred(Box(0.56, 0.54, 0.15, 0.15), 0.90),
        _pred(Box(0.85, 0.21, 0.12, 0.12), 0.85),
        _pred(Box(0.5, 0.9, 0.1, 0.1), 0.80),
    ]
    tp, fp, fn = confusion(preds, gts)
    want = max_tp_oracle([p.box for p in preds], gts, 0.30)
    assert tp == want == 3
    assert fp == 1
    assert fn == 0


def test_confusion_counts_identity(rng):
    for _ in range(50):
        gts = [random_box(rng) for _ in range(int(rng.integers(0, 5)))]
        preds = [_pred(random_box(rng), float(rng.uniform(0, 1))) for _ in range(int(rng.integers(0, 5)))]
        tp, fp, fn = confusion(preds, gts)
        assert tp + fn == len(gts)
        assert tp + fp == len(preds)
        assert tp <= min(len(preds), len(gts))


def test_confusion_greedy_close_to_optimal(rng):
    mismatches = 0
    trials = 200
    for _ in range(trials):
        gts = [random_box(rng) for _ in range(int(rng.integers(1, 6)))]
        preds = [_pred(random_box(rng), float(rng.uniform(0, 1))) for _ in range(int(rng.integers(1, 6)))]
        tp, _, _ = confusion(preds, gts)
        if tp != max_tp_oracle([p.box for p in preds], gts, 0.30):
            mismatches += 1
    assert mismatches / trials <= 0.05


def test_score_threshold_monotonicity(rng):
    gts = [random_box(rng) for _ in range(4)]
    preds = [_pred(random_box(rng), float(rng.uniform(-1, 1))) for _ in range(8)]
    prev = None
    for thr in (-1.0, -0.5, 0.0, 0.5, 1.01):
        tp, fp, _ = confusion(preds, gts, score_threshold=thr)
        if prev is not None:
            assert tp + fp <= prev
        prev = tp + fp


# ---------------------------------------------------------------------------
# ratios
# ---------------------------------------------------------------------------

def test_recall_paper_magnitude():
    assert recall(94, 6) == pytest.approx(0.940, abs=1e-12)


def test_recall_undefined():
    assert recall(0, 0) is None


def test_precision_simple():
    assert precision(3, 1) == 0.75


def test_precision_undefined():
    assert precision(0, 0) is None


def test_negative_counts_rejected():
    with pytest.raises(EvaluationError):
        recall(-1, 2)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

TABLE2 = [
    ("M1184106708LC_1508_34916_2048", 87.8, 52.9),
    ("M1184106708LC_1508_47204_2048", 85.5, 29.3),
    ("M1250049562LC_1508_16484_2048", 93.4, 46.9),
    ("M1466265041LC_1508_100_2048", 94.0, 50.5),
    ("M1466265041LC_1508_12388_2048", 82.2, 73.1),
    ("M1466265041LC_1508_49252_2048", 87.5, 64.0),
]


def test_published_rows_reproduce_means():
    rows = [result_from_ratios(n, r / 100, p / 100) for n, r, p in TABLE2]
    report = make_report(rows)
    assert f"{100 * report.mean_recall:.1f}" == "88.4"
    assert f"{100 * report.mean_precision:.1f}" == "52.8"


def test_single_image_aggregate():
    report = make_report([result_from_counts("img", 5, 0, 0)])
    assert report.mean_recall == 1.0
    text = render_table(report)
    assert "100.0" in text


def test_report_absent_values_render_dash():
    report = make_report([result_from_counts("empty", 0, 0, 0)])
    text = render_table(report)
    assert "-" in text.split("\n")[2]
    csv_text = render_csv(report)
    assert ",,," in csv_text.split("\n")[1] or ",," in csv_text.split("\n")[1]


def test_report_deterministic_bytes(monkeypatch):
    monkeypatch.setenv("NO_COLOR", "1")
    rows = [result_from_counts(f"img{i}", i + 1, i, 2) for i in range(3)]
    a = render_table(make_report(rows))
    b = render_table(make_report(rows))
    assert a.encode() == b.encode()


def test_report_requires_rows():
    with pytest.raises(EvaluationError):
        make_report([])


def test_csv_columns():
    report = make_report([result_from_counts("img", 3, 1, 2)])
    lines = render_csv(report).strip().split("\n")
    assert lines[0] == "image,recall,precision,tp,fp,fn"
    fields = lines[1].split(",")
    assert fields[0] == "img"
    assert fields[3:] == ["3", "1", "2"]


# ---------------------------------------------------------------------------
# evaluate_detections (grouped pipeline)
# ---------------------------------------------------------------------------

def test_evaluate_detections_perfect():
    gt = Box(0.5, 0.5, 0.2, 0.2)
    gts_by_key = {("imgA", 0): [gt], ("imgA", 1): [gt]}
    preds_by_key = {("imgA", 0): [_pred(gt)], ("imgA", 1): [_pred(gt)]}
    report = evaluate_detections(preds_by_key, gts_by_key)
    assert report.per_image[0].recall == 1.0
    assert report.per_image[0].precision == 1.0


def test_evaluate_detections_nms_collapses_duplicates():
    gt = Box(0.5, 0.5, 0.2, 0.2)
    preds = [_pred(gt, 0.9), _pred(gt, 0.8), _pred(gt, 0.7)]
    report = evaluate_detections({("img", 0): preds}, {("img", 0): [gt]})
    row = report.per_image[0]
    assert (row.tp, row.fp, row.fn) == (1, 0, 0)


def test_evaluate_detections_ignores_unknown_subtiles():
    gt = Box(0.5, 0.5, 0.2, 0.2)
    report = evaluate_detections(
        {("img", 0): [_pred(gt)], ("other", 3): [_pred(gt)]},
        {("img", 0): [gt]},
    )
    assert len(report.per_image) == 1
    assert report.per_image[0].name == "img"
