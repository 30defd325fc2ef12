"""Padded set matching between predicted and ground-truth boxes.

Builds the square 1 - CIoU cost matrix with constant-zero padding columns,
solves it with the Hungarian kernel, and reduces matched pairs to the box
regression loss.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple, Union

import numpy as np

from . import lap
from .geometry import Box, boxes_to_array, ciou_matrix


class MatchingError(ValueError):
    """Infeasible or invalid matching problem."""


BoxesLike = Union[Sequence[Box], np.ndarray]


@dataclass(frozen=True)
class CostMatrix:
    """Square cost grid: M real ground-truth columns, then padding."""

    values: np.ndarray
    n_real_gt: int
    n_pred: int

    def __post_init__(self) -> None:
        v = self.values
        if v.ndim != 2 or v.shape[0] != v.shape[1] or v.shape[0] != self.n_pred:
            raise MatchingError(f"cost matrix must be {self.n_pred} square, got {v.shape}")
        if self.n_real_gt > self.n_pred:
            raise MatchingError(
                f"infeasible matching: {self.n_real_gt} ground truths for {self.n_pred} predictions"
            )


@dataclass(frozen=True)
class Assignment:
    """Optimal row-to-column permutation with its cost and real matches."""

    perm: Tuple[int, ...]
    total_cost: float
    matched_pairs: List[Tuple[int, int]] = field(default_factory=list)


def _as_array(boxes: BoxesLike) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return boxes_to_array(boxes)


def build_cost_matrix(preds: BoxesLike, gts: BoxesLike) -> CostMatrix:
    """Square (N, N) matrix of 1 - CIoU costs, padded with zero columns.

    A constant padding column adds the same amount to every permutation, so
    padding can never change which real pairs are matched.
    """
    p = _as_array(preds)
    g = _as_array(gts)
    n, m = p.shape[0], g.shape[0]
    if n < 1:
        raise MatchingError("at least one prediction is required")
    if m > n:
        raise MatchingError(f"infeasible matching: {m} ground truths for {n} predictions")
    values = np.zeros((n, n), dtype=np.float64)
    if m > 0:
        values[:, :m] = 1.0 - ciou_matrix(p, g).ciou
    return CostMatrix(values=values, n_real_gt=m, n_pred=n)


def hungarian(cost: Union[CostMatrix, np.ndarray]) -> Assignment:
    """Minimum-cost assignment; lexicographically smallest among ties."""
    if isinstance(cost, CostMatrix):
        values = cost.values
        m = cost.n_real_gt
    else:
        values = np.asarray(cost, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise MatchingError(f"cost matrix must be square, got {values.shape}")
        m = values.shape[1]
    if values.shape[0] == 0:
        raise MatchingError("empty cost matrix")
    if not np.all(np.isfinite(values)):
        raise MatchingError("invalid cost: non-finite entry in cost matrix")

    perm = lap.solve(values)
    total = float(sum(float(values[i, perm[i]]) for i in range(len(perm))))
    pairs = [(i, int(j)) for i, j in enumerate(perm) if j < m]
    return Assignment(perm=tuple(int(j) for j in perm), total_cost=total, matched_pairs=pairs)


def match_and_box_loss(preds: BoxesLike, gts: BoxesLike) -> Tuple[Assignment, float]:
    """Hungarian matching plus the mean 1 - CIoU loss over real pairs.

    No annotated boxes means an empty match and zero loss; every
    prediction is then a negative for the classification loss.
    """
    cost = build_cost_matrix(preds, gts)
    assignment = hungarian(cost)
    if cost.n_real_gt == 0:
        return assignment, 0.0
    l_box = sum(float(cost.values[i, j]) for i, j in assignment.matched_pairs)
    return assignment, l_box / cost.n_real_gt
