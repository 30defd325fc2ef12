"""Provenance manifest pinned into every exported file."""
from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class ExportManifest:
    model_id: str
    image_size: int
    patch_size: int
    token_count: int
    embedding_dim: int
    prompt: str

    def __post_init__(self) -> None:
        per_side = self.image_size // self.patch_size
        if per_side * per_side != self.token_count:
            raise ValueError(
                f"token count {self.token_count} inconsistent with "
                f"{self.image_size}/{self.patch_size} patch grid"
            )

    def to_dict(self) -> dict:
        return asdict(self)
