"""Detection scoring: confusion counts, recall/precision, report rendering.

A prediction claims at most one ground truth; claims require IoU strictly
above the TP threshold. Undefined ratios (zero denominators) are reported
as absent, never silently as zero.
"""
from __future__ import annotations

import math
import os
import sys
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import Box, boxes_to_array, iou_matrix

TP_IOU_DEFAULT = 0.30
NMS_IOU_DEFAULT = 0.12
SCORE_THRESHOLD_DEFAULT = 0.0


class EvaluationError(ValueError):
    """Invalid evaluation input."""


@dataclass(frozen=True)
class Prediction:
    """One model output: a box, its anchor-similarity score, optionally
    the class embedding the score was derived from."""

    box: Box
    score: float
    embedding: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.score):
            raise EvaluationError(f"non-finite prediction score: {self.score}")
        if self.embedding is not None:
            object.__setattr__(
                self, "embedding", np.asarray(self.embedding, dtype=np.float64)
            )


@dataclass(frozen=True)
class ImageResult:
    """Confusion counts for one image; ratios are None when undefined."""

    name: str
    tp: int
    fp: int
    fn: int
    recall: Optional[float]
    precision: Optional[float]


@dataclass(frozen=True)
class EvalReport:
    per_image: List[ImageResult]
    mean_recall: Optional[float]
    mean_precision: Optional[float]
    thresholds: Dict[str, float] = field(default_factory=dict)


def confusion(
    preds: Sequence[Prediction],
    gts: Sequence[Box],
    tp_iou: float = TP_IOU_DEFAULT,
    score_threshold: float = SCORE_THRESHOLD_DEFAULT,
) -> Tuple[int, int, int]:
    """Greedy TP/FP/FN counts; expects NMS-filtered predictions.

    Predictions below the score threshold are discarded. The rest claim,
    in descending score order, the unclaimed ground truth of highest IoU,
    but only when that IoU exceeds tp_iou strictly. Ties break toward the
    lower index on both sides.
    """
    survivors = [p for p in preds if p.score >= score_threshold]
    m = len(gts)
    if not survivors:
        return 0, 0, m
    if m == 0:
        return 0, len(survivors), 0
    order = sorted(range(len(survivors)), key=lambda i: (-survivors[i].score, i))
    ious = iou_matrix(
        boxes_to_array([p.box for p in survivors]), boxes_to_array(gts)
    )
    claimed = np.zeros(m, dtype=bool)
    tp = 0
    for i in order:
        row = np.where(claimed, -1.0, ious[i])
        j = int(np.argmax(row))
        if row[j] > tp_iou:
            claimed[j] = True
            tp += 1
    fp = len(survivors) - tp
    fn = m - tp
    return tp, fp, fn


def recall(tp: int, fn: int) -> Optional[float]:
    """TP / (TP + FN); None when there are no ground truths."""
    if tp < 0 or fn < 0:
        raise EvaluationError("counts must be non-negative")
    denom = tp + fn
    return tp / denom if denom else None


def precision(tp: int, fp: int) -> Optional[float]:
    """TP / (TP + FP); None when there are no detections."""
    if tp < 0 or fp < 0:
        raise EvaluationError("counts must be non-negative")
    denom = tp + fp
    return tp / denom if denom else None


def result_from_counts(name: str, tp: int, fp: int, fn: int) -> ImageResult:
    return ImageResult(
        name=name, tp=tp, fp=fp, fn=fn, recall=recall(tp, fn), precision=precision(tp, fp)
    )


def result_from_ratios(
    name: str, recall_value: Optional[float], precision_value: Optional[float]
) -> ImageResult:
    """Image row from precomputed ratios (counts unavailable)."""
    return ImageResult(
        name=name, tp=0, fp=0, fn=0, recall=recall_value, precision=precision_value
    )


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return sum(defined) / len(defined) if defined else None


def make_report(
    per_image: Sequence[ImageResult], thresholds: Optional[Dict[str, float]] = None
) -> EvalReport:
    """Aggregate per-image results; means are unweighted over images."""
    if not per_image:
        raise EvaluationError("at least one image result is required")
    rows = sorted(per_image, key=lambda r: r.name)
    return EvalReport(
        per_image=rows,
        mean_recall=_mean([r.recall for r in rows]),
        mean_precision=_mean([r.precision for r in rows]),
        thresholds=dict(thresholds or {}),
    )


def _fmt_pct(value: Optional[float]) -> str:
    return f"{100.0 * value:.1f}" if value is not None else "-"


def _use_color(stream) -> bool:
    if os.environ.get("NO_COLOR"):
        return False
    return hasattr(stream, "isatty") and stream.isatty()


def render_table(report: EvalReport, stream=None) -> str:
    """Fixed-column text table with one decimal place and a mean row."""
    stream = stream if stream is not None else sys.stdout
    bold, reset = ("\x1b[1m", "\x1b[0m") if _use_color(stream) else ("", "")
    name_w = max([len("Image Name")] + [len(r.name) for r in report.per_image] + [len("mean")])
    header = f"{'Image Name':<{name_w}} | {'Recall (%)':>10} | {'Precision (%)':>13}"
    sep = f"{'-' * name_w}-+-{'-' * 10}-+-{'-' * 13}"
    lines = [bold + header + reset, sep]
    for r in report.per_image:
        lines.append(
            f"{r.name:<{name_w}} | {_fmt_pct(r.recall):>10} | {_fmt_pct(r.precision):>13}"
        )
    lines.append(sep)
    lines.append(
        f"{'mean':<{name_w}} | {_fmt_pct(report.mean_recall):>10} | "
        f"{_fmt_pct(report.mean_precision):>13}"
    )
    return "\n".join(lines) + "\n"


def render_csv(report: EvalReport) -> str:
    """Machine-readable rows: image,recall,precision,tp,fp,fn."""
    lines = ["image,recall,precision,tp,fp,fn"]
    for r in report.per_image:
        rec = repr(r.recall) if r.recall is not None else ""
        prec = repr(r.precision) if r.precision is not None else ""
        lines.append(f"{r.name},{rec},{prec},{r.tp},{r.fp},{r.fn}")
    return "\n".join(lines) + "\n"


def evaluate_detections(
    preds_by_key: Dict[Tuple[str, int], List[Prediction]],
    gts_by_key: Dict[Tuple[str, int], List[Box]],
    tp_iou: float = TP_IOU_DEFAULT,
    nms_iou: float = NMS_IOU_DEFAULT,
    score_threshold: float = SCORE_THRESHOLD_DEFAULT,
) -> EvalReport:
    """NMS then confusion per sub-tile, counts summed per parent image.

    Only sub-tiles present in the ground-truth manifest are scored;
    predictions for unknown sub-tiles are ignored.
    """
    from .geometry import nms

    totals: Dict[str, List[int]] = {}
    for (image, sub), gts in sorted(gts_by_key.items()):
        preds = preds_by_key.get((image, sub), [])
        kept = nms(preds, nms_iou)
        tp, fp, fn = confusion(kept, gts, tp_iou=tp_iou, score_threshold=score_threshold)
        bucket = totals.setdefault(image, [0, 0, 0])
        bucket[0] += tp
        bucket[1] += fp
        bucket[2] += fn
    per_image = [
        result_from_counts(name, tp, fp, fn) for name, (tp, fp, fn) in sorted(totals.items())
    ]
    thresholds = {
        "tp_iou": tp_iou,
        "nms_iou": nms_iou,
        "score_threshold": score_threshold,
    }
    return make_report(per_image, thresholds)


def draw_overlay(pixels: np.ndarray, boxes: Sequence[Box], value: int = 255) -> np.ndarray:
    """Debug helper: burn 1-px box outlines into a copy of a grayscale raster."""
    out = np.asarray(pixels).copy()
    h, w = out.shape
    for b in boxes:
        x1, y1, x2, y2 = b.corners
        c1, r1 = int(round(x1 * w)), int(round(y1 * h))
        c2, r2 = int(round(x2 * w)) - 1, int(round(y2 * h)) - 1
        c1, c2 = max(c1, 0), min(c2, w - 1)
        r1, r2 = max(r1, 0), min(r2, h - 1)
        if c2 < c1 or r2 < r1:
            continue
        out[r1, c1 : c2 + 1] = value
        out[r2, c1 : c2 + 1] = value
        out[r1 : r2 + 1, c1] = value
        out[r1 : r2 + 1, c2] = value
    return out
