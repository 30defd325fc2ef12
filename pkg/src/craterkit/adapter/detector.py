"""Toy patch detector: frozen encoder stack with LoRA adapters and
LoRA-adapted box/class heads. No objectness head exists.

The box head squashes logits so every emitted box is valid: the center
comes from a sigmoid and the half-extent is a sigmoid-scaled fraction of
the room between the center and the nearest image edge.
"""
from __future__ import annotations

import math
from typing import Dict, List, Optional, Tuple

import numpy as np

from ..geometry import Box
from ..losses import cosine_similarity
from .attention import ToyAttentionBlock
from .lora import AdapterError, LoraLayer


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# Squash floors: centers live in [CENTER_LO, 1 - CENTER_LO] and the extent
# scale in [EXTENT_LO, 1), so boxes stay strictly valid even when a logit
# saturates the sigmoid to exactly 0 or 1.
CENTER_LO = 0.01
EXTENT_LO = 0.01


def grid_positional_encoding(g: int, d_model: int) -> np.ndarray:
    """Fixed token encodings: explicit normalized (col, row) in the first
    two channels, sinusoids of the token index elsewhere."""
    n = g * g
    pos = np.zeros((n, d_model))
    idx = np.arange(n)
    pos[:, 0] = ((idx % g) + 0.5) / g
    pos[:, 1] = ((idx // g) + 0.5) / g
    for c in range(2, d_model):
        freq = 2.0 ** ((c - 2) // 2)
        phase = idx / n * math.pi * freq
        pos[:, c] = 0.5 * (np.sin(phase) if c % 2 == 0 else np.cos(phase))
    return pos


class ToyDetector:
    def __init__(
        self,
        grid: int,
        d_model: int,
        d_e: int,
        d_patch: int,
        n_heads: int,
        depth: int,
        rank_encoder: int,
        rank_heads: int,
        rng: np.random.Generator,
        use_positional: bool = True,
    ) -> None:
        if grid < 2:
            raise AdapterError(f"grid must be >= 2, got {grid}")
        self.grid = grid
        self.n_tokens = grid * grid
        self.d_model = d_model
        self.d_e = d_e
        self.d_patch = d_patch
        self.use_positional = use_positional

        scale = 1.0 / math.sqrt(d_patch)
        self.W_embed = rng.normal(0.0, scale, size=(d_model, d_patch))
        self.b_embed = rng.normal(0.0, 0.02, size=d_model)
        self.positional = grid_positional_encoding(grid, d_model)
        self.blocks = [
            ToyAttentionBlock(d_model, n_heads, rank_encoder, rng) for _ in range(depth)
        ]
        head_scale = 1.0 / math.sqrt(d_model)
        self.box_head = LoraLayer(
            rng.normal(0.0, head_scale, size=(4, d_model)),
            rank_heads,
            rng,
            bias=rng.normal(0.0, 0.02, size=4),
        )
        self.class_head = LoraLayer(
            rng.normal(0.0, head_scale, size=(d_e, d_model)),
            rank_heads,
            rng,
            bias=rng.normal(0.0, 0.02, size=d_e),
        )

    # -- forward ----------------------------------------------------------

    def forward(
        self, patches: np.ndarray, frozen: bool = False
    ) -> Tuple[np.ndarray, np.ndarray, Dict]:
        """(n_tokens, d_patch) patches -> boxes (n, 4), embeddings (n, d_e)."""
        patches = np.asarray(patches, dtype=np.float64)
        if patches.shape != (self.n_tokens, self.d_patch):
            raise AdapterError(
                f"expected patches {(self.n_tokens, self.d_patch)}, got {patches.shape}"
            )
        h = patches @ self.W_embed.T + self.b_embed
        if self.use_positional:
            h = h + self.positional
        block_caches = []
        for block in self.blocks:
            h, cache = block.forward(h, frozen=frozen)
            block_caches.append(cache)

        box_fwd = self.box_head.forward_frozen if frozen else self.box_head.forward
        cls_fwd = self.class_head.forward_frozen if frozen else self.class_head.forward
        z = box_fwd(h)
        emb = cls_fwd(h)
        boxes, squash_cache = self._squash(z)
        cache = {"patches": patches, "tokens": h, "blocks": block_caches, "squash": squash_cache}
        return boxes, emb, cache

    def _squash(self, z: np.ndarray) -> Tuple[np.ndarray, Dict]:
        s = sigmoid(z)
        cx = CENTER_LO + (1.0 - 2.0 * CENTER_LO) * s[:, 0]
        cy = CENTER_LO + (1.0 - 2.0 * CENTER_LO) * s[:, 1]
        uw = EXTENT_LO + (1.0 - EXTENT_LO) * s[:, 2]
        uh = EXTENT_LO + (1.0 - EXTENT_LO) * s[:, 3]
        # half extent < min(c, 1 - c): corners strictly inside the image
        w = 2.0 * uw * cx * (1.0 - cx)
        h = 2.0 * uh * cy * (1.0 - cy)
        boxes = np.stack([cx, cy, w, h], axis=1)
        return boxes, {"s": s, "cx": cx, "cy": cy, "uw": uw, "uh": uh}

    def _squash_backward(self, d_boxes: np.ndarray, cache: Dict) -> np.ndarray:
        s = cache["s"]
        cx, cy, uw, uh = cache["cx"], cache["cy"], cache["uw"], cache["uh"]
        kc = 1.0 - 2.0 * CENTER_LO
        ke = 1.0 - EXTENT_LO
        d_cx = d_boxes[:, 0] + d_boxes[:, 2] * 2.0 * uw * (1.0 - 2.0 * cx)
        d_cy = d_boxes[:, 1] + d_boxes[:, 3] * 2.0 * uh * (1.0 - 2.0 * cy)
        d_z = np.empty_like(d_boxes)
        d_z[:, 0] = d_cx * kc * s[:, 0] * (1.0 - s[:, 0])
        d_z[:, 1] = d_cy * kc * s[:, 1] * (1.0 - s[:, 1])
        d_z[:, 2] = d_boxes[:, 2] * 2.0 * cx * (1.0 - cx) * ke * s[:, 2] * (1.0 - s[:, 2])
        d_z[:, 3] = d_boxes[:, 3] * 2.0 * cy * (1.0 - cy) * ke * s[:, 3] * (1.0 - s[:, 3])
        return d_z

    def backward(self, d_boxes: np.ndarray, d_emb: np.ndarray, cache: Dict) -> None:
        """Accumulate LoRA gradients from loss gradients on boxes/embeddings."""
        h = cache["tokens"]
        d_z = self._squash_backward(d_boxes, cache["squash"])
        d_h = self.box_head.backward(h, d_z)
        d_h += self.class_head.backward(h, d_emb)
        for block, bcache in zip(reversed(self.blocks), reversed(cache["blocks"])):
            d_h = block.backward(d_h, bcache)

    # -- parameter plumbing -------------------------------------------------

    def trainables(self):
        for k, block in enumerate(self.blocks):
            yield from block.trainables(f"block{k}")
        for name, p, g in self.box_head.trainables():
            yield f"box_head.{name}", p, g
        for name, p, g in self.class_head.trainables():
            yield f"class_head.{name}", p, g

    def frozen_arrays(self):
        yield "W_embed", self.W_embed
        yield "b_embed", self.b_embed
        for k, block in enumerate(self.blocks):
            yield from block.frozen_arrays(f"block{k}")
        yield "box_head.W", self.box_head.W
        yield "box_head.bias", self.box_head.bias
        yield "class_head.W", self.class_head.W
        yield "class_head.bias", self.class_head.bias

    def zero_grad(self) -> None:
        for block in self.blocks:
            block.zero_grad()
        self.box_head.zero_grad()
        self.class_head.zero_grad()

    def n_trainable(self) -> int:
        return sum(p.size for _, p, _ in self.trainables())

    def n_total(self) -> int:
        return self.n_trainable() + sum(a.size for _, a in self.frozen_arrays())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for _, p, _ in self.trainables()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        offset = 0
        for _, p, _ in self.trainables():
            p[...] = flat[offset : offset + p.size].reshape(p.shape)
            offset += p.size
        if offset != flat.size:
            raise AdapterError(f"flat vector size {flat.size}, expected {offset}")

    def grad_flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for _, _, g in self.trainables()])


def toy_forward(
    detector: ToyDetector,
    patch_grid: np.ndarray,
    anchor: Optional[np.ndarray] = None,
    frozen: bool = False,
) -> List["Prediction"]:
    """Run the detector over a g x g patch grid and wrap the outputs.

    Scores are anchor cosine similarities when an anchor is given, else 0.
    """
    from ..evaluation import Prediction

    patches = np.asarray(patch_grid, dtype=np.float64)
    if patches.ndim == 3:
        patches = patches.reshape(detector.n_tokens, -1)
    boxes, emb, _ = detector.forward(patches, frozen=frozen)
    preds = []
    for row, e in zip(boxes, emb):
        score = cosine_similarity(e, anchor) if anchor is not None else 0.0
        preds.append(Prediction(box=Box(*row), score=score, embedding=e))
    return preds
