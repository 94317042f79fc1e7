"""Nearest-centroid classification of POST triples.

Every threshold in this package is a squared distance in bytes². Model files
say so explicitly through ``distance_units`` and are refused otherwise.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Sequence, Union

import numpy as np

from .tracker import Triple

log = logging.getLogger(__name__)

DISTANCE_UNITS = "squared_bytes"


class ModelError(ValueError):
    """A model file or model object violates its invariants."""


def distance_sq(v: Sequence[float], c: Sequence[float]) -> float:
    d1 = v[0] - c[0]
    d2 = v[1] - c[1]
    d3 = v[2] - c[2]
    return float(d1 * d1 + d2 * d2 + d3 * d3)


def distances_sq(triples: np.ndarray, c: Sequence[float]) -> np.ndarray:
    """Vectorised distance_sq over an (n, 3) array.

    Summation order matches distance_sq so both give bit-identical results.
    """
    diff = np.asarray(triples, dtype=np.float64).reshape(-1, 3) - np.asarray(c, dtype=np.float64)
    return diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]


@dataclass(frozen=True)
class FamilyModel:
    family: str
    centroid: tuple[float, float, float]
    d_min_sq: float
    d_max_sq: float
    d_limit_sq: Optional[float] = None
    trained_on: int = 0
    created: Optional[str] = None
    provenance: Optional[dict] = field(default=None, compare=False)

    def validate(self, require_limit: bool = False) -> "FamilyModel":
        if not self.family:
            raise ModelError("model has no family name")
        if len(self.centroid) != 3 or not all(math.isfinite(x) for x in self.centroid):
            raise ModelError(f"{self.family}: centroid must be three finite numbers")
        for name in ("d_min_sq", "d_max_sq"):
            value = getattr(self, name)
            if value is None or not math.isfinite(value) or value < 0:
                raise ModelError(f"{self.family}: {name} must be a non-negative number")
        if self.d_min_sq > self.d_max_sq:
            raise ModelError(f"{self.family}: d_min_sq > d_max_sq")
        if self.d_limit_sq is not None:
            if not math.isfinite(self.d_limit_sq) or self.d_limit_sq <= 0:
                raise ModelError(f"{self.family}: d_limit_sq must be positive")
        elif require_limit:
            raise ModelError(f"{self.family}: model is not tuned (d_limit_sq missing)")
        if self.trained_on < 0:
            raise ModelError(f"{self.family}: trained_on must be non-negative")
        return self

    @property
    def usable(self) -> bool:
        return self.d_limit_sq is not None and self.d_limit_sq > 0

    def with_limit(self, d_limit_sq: float, provenance: Optional[dict] = None) -> "FamilyModel":
        return replace(self, d_limit_sq=float(d_limit_sq), provenance=provenance).validate(require_limit=True)

    def to_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "family": self.family,
            "centroid": [float(x) for x in self.centroid],
            "d_min_sq": float(self.d_min_sq),
            "d_max_sq": float(self.d_max_sq),
        }
        if self.d_limit_sq is not None:
            doc["d_limit_sq"] = float(self.d_limit_sq)
        doc["distance_units"] = DISTANCE_UNITS
        doc["trained_on"] = int(self.trained_on)
        if self.created is not None:
            doc["created"] = self.created
        if self.provenance is not None:
            doc["provenance"] = self.provenance
        return doc

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "FamilyModel":
        units = doc.get("distance_units")
        if units != DISTANCE_UNITS:
            raise ModelError(f"distance_units must be {DISTANCE_UNITS!r}, got {units!r}")
        try:
            model = cls(
                family=str(doc["family"]),
                centroid=tuple(float(x) for x in doc["centroid"]),
                d_min_sq=float(doc["d_min_sq"]),
                d_max_sq=float(doc["d_max_sq"]),
                d_limit_sq=None if doc.get("d_limit_sq") is None else float(doc["d_limit_sq"]),
                trained_on=int(doc.get("trained_on", 0)),
                created=doc.get("created"),
                provenance=doc.get("provenance"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelError(f"malformed model document: {exc}") from exc
        return model.validate()


def dump_model(model: FamilyModel) -> str:
    return json.dumps(model.to_dict(), indent=2) + "\n"


def save_model(model: FamilyModel, path: Union[str, Path]) -> None:
    Path(path).write_text(dump_model(model), encoding="utf-8")


def load_model(path: Union[str, Path]) -> FamilyModel:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ModelError(f"{path}: expected a JSON object")
    return FamilyModel.from_dict(doc)


@dataclass(frozen=True)
class Verdict:
    malicious: bool
    family: Optional[str]
    distance_sq: Optional[float]
    triple: Triple
    server_key: Optional[str] = None
    t: Optional[float] = None


def classify(
    v: Sequence[int],
    models: Sequence[FamilyModel],
    server_key: Optional[str] = None,
    t: Optional[float] = None,
) -> Verdict:
    """Match ``v`` against every model; the closest matching family wins.

    A triple matches a model when its squared distance is strictly below the
    model's limit. Exact distance ties go to the lexicographically smaller
    family name. A benign verdict carries the smallest distance to any model.
    """
    triple = Triple(*v)
    if not models:
        log.warning("classify called with no models; reporting benign")
        return Verdict(False, None, None, triple, server_key, t)
    best = None
    best_match = None
    for m in models:
        if not m.usable:
            raise ModelError(f"{m.family}: model is not tuned (d_limit_sq missing)")
        d = distance_sq(triple, m.centroid)
        rank = (d, m.family)
        if best is None or rank < best:
            best = rank
        if d < m.d_limit_sq and (best_match is None or rank < best_match):
            best_match = rank
    if best_match is not None:
        return Verdict(True, best_match[1], best_match[0], triple, server_key, t)
    return Verdict(False, None, best[0], triple, server_key, t)
