"""Classification and box loss terms plus the training-rate schedule.

The contrastive term pulls matched (positive) class embeddings toward the
anchor and hinges negatives at a small margin above orthogonality.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

ALPHA_BOX_DEFAULT = 7.5
ALPHA_CLS_DEFAULT = 3.0
TAU_DEFAULT = 0.1
WARMUP_FRACTION = 0.10


class LossError(ValueError):
    """Invalid loss input."""


def normalize(values: Sequence[float]) -> np.ndarray:
    """L2-normalize a vector; zero vectors are rejected."""
    v = np.asarray(values, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0 or not math.isfinite(norm):
        raise LossError("invalid embedding: zero or non-finite norm")
    return v / norm


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    """Dot product of the L2-normalized inputs, in [-1, 1]."""
    an, bn = normalize(a), normalize(b)
    return float(np.clip(an @ bn, -1.0, 1.0))


@dataclass(frozen=True)
class ContrastiveBatch:
    """Embeddings with positive/negative labels against one anchor."""

    embeddings: np.ndarray  # (n, d), rows need not be pre-normalized
    labels: np.ndarray  # (n,) bool, True = positive
    anchor: np.ndarray  # (d,)
    tau: float = TAU_DEFAULT

    def __post_init__(self) -> None:
        emb = np.asarray(self.embeddings, dtype=np.float64)
        lab = np.asarray(self.labels, dtype=bool)
        if emb.ndim != 2 or lab.shape != (emb.shape[0],):
            raise LossError(f"shape mismatch: {emb.shape} embeddings, {lab.shape} labels")
        if not (0.0 <= self.tau < 1.0):
            raise LossError(f"tau must be in [0, 1), got {self.tau}")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "labels", lab)
        object.__setattr__(self, "anchor", normalize(self.anchor))


def _cosines(batch: ContrastiveBatch) -> Tuple[np.ndarray, np.ndarray]:
    emb = batch.embeddings
    norms = np.linalg.norm(emb, axis=1)
    if np.any(norms == 0.0):
        raise LossError("invalid embedding: zero norm in batch")
    cos = (emb @ batch.anchor) / norms
    return cos, norms


def contrastive_loss(batch: ContrastiveBatch) -> float:
    """Mean (1 - cos) over positives plus mean hinge max(0, cos - tau)
    over negatives; an empty side contributes zero."""
    cos, _ = _cosines(batch)
    pos = cos[batch.labels]
    neg = cos[~batch.labels]
    loss = 0.0
    if pos.size:
        loss += float(np.mean(1.0 - pos))
    if neg.size:
        loss += float(np.mean(np.maximum(0.0, neg - batch.tau)))
    return loss


def contrastive_loss_grad(batch: ContrastiveBatch) -> np.ndarray:
    """d(loss)/d(embeddings), shape (n, d).

    For a raw embedding e with unit anchor t:
    d cos / d e = (t - cos * e / |e|) / |e|.
    """
    cos, norms = _cosines(batch)
    emb = batch.embeddings
    t = batch.anchor
    n_pos = int(batch.labels.sum())
    n_neg = emb.shape[0] - n_pos

    dcos = np.zeros(emb.shape[0])
    if n_pos:
        dcos[batch.labels] = -1.0 / n_pos
    if n_neg:
        active = (~batch.labels) & (cos > batch.tau)
        dcos[active] = 1.0 / n_neg

    unit = emb / norms[:, None]
    dcos_demb = (t[None, :] - cos[:, None] * unit) / norms[:, None]
    return dcos[:, None] * dcos_demb


def total_loss(
    l_box: float,
    l_cls: float,
    alpha_box: float = ALPHA_BOX_DEFAULT,
    alpha_cls: float = ALPHA_CLS_DEFAULT,
) -> float:
    """Weighted sum favoring localization over classification."""
    for name, v in (("l_box", l_box), ("l_cls", l_cls), ("alpha_box", alpha_box), ("alpha_cls", alpha_cls)):
        if not math.isfinite(v):
            raise LossError(f"non-finite {name}: {v}")
    return alpha_box * l_box + alpha_cls * l_cls


def lr_schedule(step: int, total_steps: int, peak: float) -> float:
    """Linear warmup over the first 10% of steps, cosine decay to zero.

    lr(0) = 0, lr(warmup) = peak, lr(total_steps) = 0.
    """
    if total_steps <= 0:
        raise LossError(f"invalid config: total_steps must be positive, got {total_steps}")
    if not (0 <= step <= total_steps):
        raise LossError(f"step {step} outside [0, {total_steps}]")
    if not (peak > 0.0):
        raise LossError(f"peak learning rate must be positive, got {peak}")
    warmup = math.ceil(WARMUP_FRACTION * total_steps)
    if step < warmup:
        return peak * step / warmup
    progress = (step - warmup) / (total_steps - warmup) if total_steps > warmup else 1.0
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))
