"""Synthetic desk-scale scenes: a g x g grid of grayscale-like patch
features with ring-marked "crater" cells and matching ground-truth boxes.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from ..geometry import Box


@dataclass(frozen=True)
class Scene:
    patches: np.ndarray  # (g*g, patch_px*patch_px), values in [0, 1]
    gt_boxes: List[Box]


RADIUS_FRAC = 0.35  # crater radius as a fraction of the cell side


def _ring_template(patch_px: int, radius_frac: float) -> np.ndarray:
    c = (patch_px - 1) / 2.0
    yy, xx = np.mgrid[0:patch_px, 0:patch_px]
    dist = np.sqrt((xx - c) ** 2 + (yy - c) ** 2)
    return np.exp(-((dist - radius_frac * patch_px) ** 2) / 2.0)


def make_scenes(
    n_scenes: int,
    grid: int,
    patch_px: int,
    rng: np.random.Generator,
    max_craters: int = 1,
    radius_frac: float = RADIUS_FRAC,
) -> List[Scene]:
    """Scenes with 1..max_craters ring-marked craters in distinct cells."""
    scenes = []
    n_tokens = grid * grid
    for _ in range(n_scenes):
        patches = rng.uniform(0.0, 0.2, size=(n_tokens, patch_px * patch_px))
        k = int(rng.integers(1, max_craters + 1))
        cells = rng.choice(n_tokens, size=k, replace=False)
        boxes = []
        for cell in sorted(int(c) for c in cells):
            patch = patches[cell].reshape(patch_px, patch_px)
            patch = patch + _ring_template(patch_px, radius_frac)
            patches[cell] = np.clip(patch, 0.0, 1.0).ravel()
            col, row = cell % grid, cell // grid
            boxes.append(
                Box(
                    cx=(col + 0.5) / grid,
                    cy=(row + 0.5) / grid,
                    w=2.0 * radius_frac / grid,
                    h=2.0 * radius_frac / grid,
                )
            )
        scenes.append(Scene(patches=patches, gt_boxes=boxes))
    return scenes


def make_anchor(d_e: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-norm stand-in for the text-encoder anchor vector."""
    v = rng.normal(size=d_e)
    return v / np.linalg.norm(v)
