"""Detector backends.

Owlv2Backend wraps the real pretrained checkpoint (needs the optional
transformers/torch extra and the downloaded weights). SyntheticBackend is a
deterministic random-projection stand-in with the same output contract, used
for offline smoke runs and interchange tests.
"""
from __future__ import annotations

import hashlib
from typing import Tuple

import numpy as np
from PIL import Image

from .manifest import ExportManifest


class BackendUnavailable(RuntimeError):
    """The requested model cannot be loaded in this environment."""


def _l2_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return x / norms


class SyntheticBackend:
    """Deterministic stand-in: fixed random projection of patch features.

    Emits one prediction per patch of a coarse grid, with boxes centered on
    the patches and embeddings derived from pixel content, so files carry
    realistic structure without any checkpoint.
    """

    IMAGE_SIZE = 64
    PATCH_SIZE = 8
    EMBEDDING_DIM = 512

    def __init__(self, prompt_seed: str = "synthetic-rp-v1") -> None:
        self.model_id = prompt_seed
        grid = self.IMAGE_SIZE // self.PATCH_SIZE
        self.grid = grid
        rng = np.random.default_rng(
            int.from_bytes(hashlib.sha256(prompt_seed.encode()).digest()[:8], "big")
        )
        d_patch = self.PATCH_SIZE * self.PATCH_SIZE
        self.projection = rng.normal(0.0, 1.0 / np.sqrt(d_patch), size=(self.EMBEDDING_DIM, d_patch))
        self.bias = rng.normal(0.0, 0.1, size=self.EMBEDDING_DIM)

    def manifest(self, prompt: str) -> ExportManifest:
        return ExportManifest(
            model_id=self.model_id,
            image_size=self.IMAGE_SIZE,
            patch_size=self.PATCH_SIZE,
            token_count=self.grid * self.grid,
            embedding_dim=self.EMBEDDING_DIM,
            prompt=prompt,
        )

    def encode_prompt(self, prompt: str) -> np.ndarray:
        seed = int.from_bytes(hashlib.sha256(("prompt:" + prompt).encode()).digest()[:8], "big")
        v = np.random.default_rng(seed).normal(size=self.EMBEDDING_DIM)
        return v / np.linalg.norm(v)

    def detect(self, pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        img = Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L")
        small = np.asarray(
            img.resize((self.IMAGE_SIZE, self.IMAGE_SIZE), Image.BILINEAR), dtype=np.float64
        )
        g, p = self.grid, self.PATCH_SIZE
        patches = (
            small.reshape(g, p, g, p).transpose(0, 2, 1, 3).reshape(g * g, p * p) / 255.0
        )
        embeddings = _l2_rows(patches @ self.projection.T + self.bias)
        idx = np.arange(g * g)
        cx = ((idx % g) + 0.5) / g
        cy = ((idx // g) + 0.5) / g
        # box extent tracks local contrast, floored to stay valid geometry
        spread = patches.std(axis=1)
        size = np.clip(0.4 / g + spread / g, 0.01, 1.0 / g)
        w = np.minimum(size, 2 * np.minimum(cx, 1 - cx))
        h = np.minimum(size, 2 * np.minimum(cy, 1 - cy))
        boxes = np.stack([cx, cy, w, h], axis=1)
        return boxes, embeddings


class Owlv2Backend:
    """Real pretrained open-vocabulary detector via transformers.

    All 3600 per-patch predictions are emitted; no score threshold and no
    NMS here, downstream tooling owns the filtering.
    """

    DEFAULT_MODEL_ID = "google/owlv2-base-patch16-ensemble"
    IMAGE_SIZE = 960
    PATCH_SIZE = 16
    EMBEDDING_DIM = 512

    def __init__(self, model_id: str = DEFAULT_MODEL_ID) -> None:
        self.model_id = model_id
        try:
            import torch
            from transformers import Owlv2ForObjectDetection, Owlv2Processor
        except ImportError as exc:
            raise BackendUnavailable(
                f"transformers/torch not installed; cannot load {model_id}"
            ) from exc
        try:
            self._torch = torch
            self.processor = Owlv2Processor.from_pretrained(model_id)
            self.model = Owlv2ForObjectDetection.from_pretrained(model_id)
            self.model.eval()
        except Exception as exc:  # offline hub, missing weights, bad id
            raise BackendUnavailable(f"cannot load {model_id}: {exc}") from exc

    def manifest(self, prompt: str) -> ExportManifest:
        grid = self.IMAGE_SIZE // self.PATCH_SIZE
        return ExportManifest(
            model_id=self.model_id,
            image_size=self.IMAGE_SIZE,
            patch_size=self.PATCH_SIZE,
            token_count=grid * grid,
            embedding_dim=self.EMBEDDING_DIM,
            prompt=prompt,
        )

    def encode_prompt(self, prompt: str) -> np.ndarray:
        torch = self._torch
        inputs = self.processor(text=[[prompt]], return_tensors="pt")
        with torch.no_grad():
            embeds = self.model.owlv2.get_text_features(**inputs)
        v = embeds[0].double().numpy()
        return v / np.linalg.norm(v)

    def detect(self, pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        torch = self._torch
        img = Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").convert("RGB")
        inputs = self.processor(
            text=[["crater"]], images=img, return_tensors="pt"
        )
        with torch.no_grad():
            outputs = self.model(**inputs)
        boxes = outputs.pred_boxes[0].double().numpy()  # cxcywh, normalized
        embeddings = _l2_rows(outputs.class_embeds[0].double().numpy())
        # clamp into the valid unit-square domain; drop degenerate tokens
        x1 = np.clip(boxes[:, 0] - boxes[:, 2] / 2, 0.0, 1.0)
        y1 = np.clip(boxes[:, 1] - boxes[:, 3] / 2, 0.0, 1.0)
        x2 = np.clip(boxes[:, 0] + boxes[:, 2] / 2, 0.0, 1.0)
        y2 = np.clip(boxes[:, 1] + boxes[:, 3] / 2, 0.0, 1.0)
        keep = (x2 - x1 > 1e-6) & (y2 - y1 > 1e-6)
        clipped = np.stack(
            [(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=1
        )
        return clipped[keep], embeddings[keep]


def make_backend(name: str, model_id: str | None = None):
    if name == "synthetic":
        return SyntheticBackend()
    if name == "owlv2":
        return Owlv2Backend(model_id or Owlv2Backend.DEFAULT_MODEL_ID)
    raise ValueError(f"unknown backend {name!r}")
