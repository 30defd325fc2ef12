"""Desk-scale training loop: per-step Hungarian re-matching, combined
box + contrastive loss, plain gradient descent on the LoRA parameters
under the warmup-cosine schedule.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..geometry import ciou_fixed_alpha, ciou_grad, ciou_matrix
from ..losses import (
    ALPHA_BOX_DEFAULT,
    LossError,
    ALPHA_CLS_DEFAULT,
    TAU_DEFAULT,
    ContrastiveBatch,
    contrastive_loss,
    contrastive_loss_grad,
    lr_schedule,
    total_loss,
)
from ..matching import MatchingError, build_cost_matrix, hungarian
from .detector import ToyDetector
from .scenes import Scene, make_anchor, make_scenes


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"training diverged: non-finite loss at step {step}")
        self.step = step


class ConfigError(ValueError):
    """Malformed training config."""


@dataclass(frozen=True)
class ToyTrainConfig:
    grid: int = 4
    d_model: int = 32
    d_e: int = 16
    patch_px: int = 16
    n_heads: int = 4
    depth: int = 2
    rank_encoder: int = 2
    rank_heads: int = 4
    steps: int = 200
    peak_lr: float = 0.015
    alpha_box: float = ALPHA_BOX_DEFAULT
    alpha_cls: float = ALPHA_CLS_DEFAULT
    tau: float = TAU_DEFAULT
    n_scenes: int = 2
    max_craters: int = 1
    seed: int = 0


_INT_FIELDS = {
    "grid", "d_model", "d_e", "patch_px", "n_heads", "depth",
    "rank_encoder", "rank_heads", "steps", "n_scenes", "max_craters", "seed",
}


def parse_config(text: str) -> ToyTrainConfig:
    """Parse `key = value` lines; '#' starts a comment."""
    valid = {f.name for f in dataclasses.fields(ToyTrainConfig)}
    values: Dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in valid:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = int(val) if key in _INT_FIELDS else float(val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from exc
    return ToyTrainConfig(**values)


def render_config(config: ToyTrainConfig) -> str:
    lines = [f"{f.name} = {getattr(config, f.name)}" for f in dataclasses.fields(config)]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class TrajectoryRow:
    step: int
    lr: float
    l_box: float
    l_cls: float
    l_total: float


def trajectory_csv(rows: Sequence[TrajectoryRow]) -> str:
    out = ["step,lr,l_box,l_cls,l_total"]
    for r in rows:
        out.append(f"{r.step},{r.lr!r},{r.l_box!r},{r.l_cls!r},{r.l_total!r}")
    return "\n".join(out) + "\n"


def build_detector(config: ToyTrainConfig, rng: np.random.Generator) -> ToyDetector:
    return ToyDetector(
        grid=config.grid,
        d_model=config.d_model,
        d_e=config.d_e,
        d_patch=config.patch_px * config.patch_px,
        n_heads=config.n_heads,
        depth=config.depth,
        rank_encoder=config.rank_encoder,
        rank_heads=config.rank_heads,
        rng=rng,
    )


FixedStructure = List[Tuple[List[Tuple[int, int]], Dict[Tuple[int, int], float]]]


def _match_scene(boxes: np.ndarray, scene: Scene):
    gt = np.stack([b.as_array() for b in scene.gt_boxes]) if scene.gt_boxes else None
    if gt is None:
        return [], None
    assignment = hungarian(build_cost_matrix(boxes, gt))
    return assignment.matched_pairs, gt


def batch_loss_and_grads(
    detector: ToyDetector,
    scenes: Sequence[Scene],
    anchor: np.ndarray,
    config: ToyTrainConfig,
    accumulate_grads: bool = True,
    fixed: Optional[FixedStructure] = None,
) -> Tuple[float, float]:
    """Mean losses over scenes; optionally accumulates LoRA gradients.

    `fixed` freezes the matched pairs and each pair's CIoU alpha (used by
    gradient checks, where the assignment must not move under probing).
    """
    n_scenes = len(scenes)
    box_total = 0.0
    cls_total = 0.0
    for s_idx, scene in enumerate(scenes):
        boxes, emb, cache = detector.forward(scene.patches)
        gt = (
            np.stack([b.as_array() for b in scene.gt_boxes])
            if scene.gt_boxes
            else None
        )
        if fixed is not None:
            pairs, alphas = fixed[s_idx]
        else:
            pairs, _ = _match_scene(boxes, scene)
            alphas = None

        m = len(pairs)
        l_box = 0.0
        d_boxes = np.zeros_like(boxes)
        for i, j in pairs:
            if alphas is None:
                l_box += 1.0 - float(ciou_matrix(boxes[i : i + 1], gt[j : j + 1]).ciou[0, 0])
            else:
                l_box += 1.0 - ciou_fixed_alpha(boxes[i], gt[j], alphas[(i, j)])
            d_boxes[i] = -ciou_grad(boxes[i], gt[j])
        if m:
            l_box /= m
            d_boxes /= m

        labels = np.zeros(detector.n_tokens, dtype=bool)
        for i, _ in pairs:
            labels[i] = True
        batch = ContrastiveBatch(emb, labels, anchor, tau=config.tau)
        l_cls = contrastive_loss(batch)

        box_total += l_box
        cls_total += l_cls
        if accumulate_grads:
            d_emb = contrastive_loss_grad(batch)
            scale = 1.0 / n_scenes
            detector.backward(
                d_boxes * (config.alpha_box * scale),
                d_emb * (config.alpha_cls * scale),
                cache,
            )
    return box_total / n_scenes, cls_total / n_scenes


def toy_train(
    config: ToyTrainConfig,
    scenes: Optional[Sequence[Scene]] = None,
    rng_seed: Optional[int] = None,
) -> Tuple[List[TrajectoryRow], ToyDetector]:
    """Train the LoRA parameters; frozen weights are never touched.

    Returns the per-step trajectory (plus a final post-training row) and
    the trained detector.
    """
    seed = config.seed if rng_seed is None else rng_seed
    rng = np.random.default_rng(seed)
    detector = build_detector(config, rng)
    if scenes is None:
        scenes = make_scenes(config.n_scenes, config.grid, config.patch_px, rng, config.max_craters)
    anchor = make_anchor(config.d_e, rng)

    rows: List[TrajectoryRow] = []
    for step in range(config.steps):
        detector.zero_grad()
        try:
            l_box, l_cls = batch_loss_and_grads(detector, scenes, anchor, config)
            l_total = total_loss(l_box, l_cls, config.alpha_box, config.alpha_cls)
        except (MatchingError, LossError) as exc:
            # non-finite boxes or embeddings out of the forward pass
            raise TrainingDivergedError(step) from exc
        # peak_lr 0 disables updates entirely (lr_schedule requires > 0)
        lr = 0.0 if config.peak_lr == 0.0 else lr_schedule(step, config.steps, config.peak_lr)
        rows.append(TrajectoryRow(step, lr, l_box, l_cls, l_total))
        if not math.isfinite(l_total):
            raise TrainingDivergedError(step)
        for _, p, g in detector.trainables():
            p -= lr * g

    l_box, l_cls = batch_loss_and_grads(detector, scenes, anchor, config, accumulate_grads=False)
    l_total = total_loss(l_box, l_cls, config.alpha_box, config.alpha_cls)
    if not math.isfinite(l_total):
        raise TrainingDivergedError(config.steps)
    rows.append(TrajectoryRow(config.steps, 0.0, l_box, l_cls, l_total))
    return rows, detector


def make_check_functions(
    detector: ToyDetector,
    scenes: Sequence[Scene],
    anchor: np.ndarray,
    config: ToyTrainConfig,
) -> Tuple[Callable[[np.ndarray], float], Callable[[np.ndarray], np.ndarray], np.ndarray]:
    """Loss/gradient closures over the flattened LoRA parameters.

    The assignment and the per-pair CIoU alphas are frozen at the current
    parameters so central differences probe a differentiable function.
    """
    base = detector.get_flat()
    fixed: FixedStructure = []
    for scene in scenes:
        boxes, _, _ = detector.forward(scene.patches)
        pairs, gt = _match_scene(boxes, scene)
        alphas = {}
        for i, j in pairs:
            alphas[(i, j)] = float(ciou_matrix(boxes[i : i + 1], gt[j : j + 1]).alpha[0, 0])
        fixed.append((pairs, alphas))

    def loss_at(flat: np.ndarray) -> float:
        detector.set_flat(flat)
        try:
            l_box, l_cls = batch_loss_and_grads(
                detector, scenes, anchor, config, accumulate_grads=False, fixed=fixed
            )
        finally:
            detector.set_flat(base)
        return total_loss(l_box, l_cls, config.alpha_box, config.alpha_cls)

    def grad_at(flat: np.ndarray) -> np.ndarray:
        detector.set_flat(flat)
        try:
            detector.zero_grad()
            batch_loss_and_grads(detector, scenes, anchor, config, fixed=fixed)
            return detector.grad_flat()
        finally:
            detector.set_flat(base)

    return loss_at, grad_at, base
