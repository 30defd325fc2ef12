"""Prediction/anchor interchange: JSON-lines records validated against the
shipped schemas. The exporter writes these files; evaluation consumes them.
"""
from __future__ import annotations

import importlib.resources
import json
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import jsonschema
import numpy as np

from .evaluation import Prediction
from .geometry import Box, GeometryError
from .losses import cosine_similarity

SCORE_RECOMPUTE_TOL = 1e-6


class InterchangeError(ValueError):
    """Record fails schema or semantic validation."""


def _load_schema(name: str) -> dict:
    path = importlib.resources.files("craterkit") / "schemas" / name
    return json.loads(path.read_text())


_PREDICTION_SCHEMA = _load_schema("prediction.schema.json")
_ANCHOR_SCHEMA = _load_schema("anchor.schema.json")
_MANIFEST_SCHEMA = _load_schema("manifest.schema.json")

_RESOLVER_STORE = {
    schema["$id"]: schema for schema in (_PREDICTION_SCHEMA, _ANCHOR_SCHEMA, _MANIFEST_SCHEMA)
}


def _validator(schema: dict) -> jsonschema.Validator:
    registry = None
    try:
        from referencing import Registry, Resource

        registry = Registry().with_resources(
            (uri, Resource.from_contents(doc)) for uri, doc in _RESOLVER_STORE.items()
        )
        return jsonschema.Draft202012Validator(schema, registry=registry)
    except ImportError:  # older jsonschema
        resolver = jsonschema.RefResolver.from_schema(schema, store=_RESOLVER_STORE)
        return jsonschema.Draft202012Validator(schema, resolver=resolver)


_PREDICTION_VALIDATOR = _validator(_PREDICTION_SCHEMA)
_ANCHOR_VALIDATOR = _validator(_ANCHOR_SCHEMA)
_MANIFEST_VALIDATOR = _validator(_MANIFEST_SCHEMA)


def schema_text(name: str) -> str:
    """Raw schema JSON by name: prediction, anchor or manifest."""
    return json.dumps(_load_schema(f"{name}.schema.json"), indent=2)


@dataclass(frozen=True)
class PredictionRecord:
    tile_name: str
    sub_tile: int
    prediction: Prediction


def make_tile_key(tile_name: str, sub_tile: int) -> str:
    return f"{tile_name}#{sub_tile}"


def split_tile_key(key: str) -> Tuple[str, int]:
    name, sep, sub = key.rpartition("#")
    if not sep or not sub.isdigit():
        raise InterchangeError(f"bad tile key {key!r}: expected '<tile>#<sub>'")
    return name, int(sub)


def prediction_to_obj(record: PredictionRecord) -> dict:
    p = record.prediction
    obj = {
        "tile": make_tile_key(record.tile_name, record.sub_tile),
        "box": [p.box.cx, p.box.cy, p.box.w, p.box.h],
        "score": p.score,
    }
    if p.embedding is not None:
        obj["embedding"] = [float(v) for v in p.embedding]
    return obj


def prediction_from_obj(obj: dict) -> PredictionRecord:
    errors = sorted(_PREDICTION_VALIDATOR.iter_errors(obj), key=str)
    if errors:
        raise InterchangeError(f"prediction record invalid: {errors[0].message}")
    tile_name, sub = split_tile_key(obj["tile"])
    try:
        box = Box(*obj["box"])
    except GeometryError as exc:
        raise InterchangeError(f"prediction box invalid: {exc}") from exc
    emb = obj.get("embedding")
    return PredictionRecord(
        tile_name=tile_name,
        sub_tile=sub,
        prediction=Prediction(
            box=box,
            score=float(obj["score"]),
            embedding=None if emb is None else np.asarray(emb, dtype=np.float64),
        ),
    )


def read_predictions(lines: Iterable[str]) -> Tuple[Optional[dict], List[PredictionRecord]]:
    """Parse prediction JSON-lines; a manifest header line may come first."""
    manifest: Optional[dict] = None
    records: List[PredictionRecord] = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise InterchangeError(f"line {lineno}: not valid JSON: {exc}") from exc
        if "manifest" in obj:
            errors = sorted(_MANIFEST_VALIDATOR.iter_errors(obj), key=str)
            if errors:
                raise InterchangeError(f"line {lineno}: manifest invalid: {errors[0].message}")
            manifest = obj["manifest"]
            continue
        try:
            records.append(prediction_from_obj(obj))
        except InterchangeError as exc:
            raise InterchangeError(f"line {lineno}: {exc}") from exc
    return manifest, records


def write_predictions(
    records: Iterable[PredictionRecord], stream, manifest: Optional[dict] = None
) -> None:
    if manifest is not None:
        stream.write(json.dumps({"manifest": manifest}) + "\n")
    for record in records:
        stream.write(json.dumps(prediction_to_obj(record)) + "\n")


def read_anchor(text: str) -> Tuple[np.ndarray, Optional[dict]]:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InterchangeError(f"anchor file is not valid JSON: {exc}") from exc
    errors = sorted(_ANCHOR_VALIDATOR.iter_errors(obj), key=str)
    if errors:
        raise InterchangeError(f"anchor invalid: {errors[0].message}")
    anchor = np.asarray(obj["anchor"], dtype=np.float64)
    norm = float(np.linalg.norm(anchor))
    if not math.isfinite(norm) or norm == 0.0:
        raise InterchangeError("anchor vector has zero or non-finite norm")
    return anchor, obj.get("manifest")


def write_anchor(anchor: np.ndarray, stream, manifest: Optional[dict] = None) -> None:
    obj = {"anchor": [float(v) for v in np.asarray(anchor, dtype=np.float64)]}
    if manifest is not None:
        obj["manifest"] = manifest
    stream.write(json.dumps(obj))


def verify_scores(
    records: Iterable[PredictionRecord],
    anchor: np.ndarray,
    tol: float = SCORE_RECOMPUTE_TOL,
) -> List[Tuple[str, float, float]]:
    """Recompute scores from embeddings; return (tile key, stored, fresh)
    for every record that disagrees beyond tol."""
    bad = []
    for record in records:
        emb = record.prediction.embedding
        if emb is None:
            continue
        fresh = cosine_similarity(emb, anchor)
        if abs(fresh - record.prediction.score) > tol:
            bad.append(
                (make_tile_key(record.tile_name, record.sub_tile), record.prediction.score, fresh)
            )
    return bad
