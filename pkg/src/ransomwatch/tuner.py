"""Fine-tuning phase: ROC sweeps over candidate limits and threshold selection.

TPR is counted per infection trace (a trace is caught if any of its triples
falls under the limit). FPR is counted twice over the benign data: per triple,
and per server key that produced at least one triple. Each trace file is an
independent tracker session, so the same domain in two benign traces counts
as two keys.
"""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence, Union

import numpy as np

from .detector import FamilyModel, distances_sq
from .tracker import group_sizes, triple_array
from .traces import TraceSet

log = logging.getLogger(__name__)

GRID_HEADROOM = 1.1
DEFAULT_GRID_STEPS = 200
ROC_HEADER = ("threshold_sq", "tpr", "fpr_triples", "fpr_domains")


class RocPoint(NamedTuple):
    threshold_sq: float
    tpr: float
    fpr_triples: float
    fpr_domains: float


@dataclass(frozen=True)
class SweepCounts:
    """Raw numerators and denominators behind a ROC curve.

    Keeping counts rather than rates is what lets two datasets be pooled.
    """

    thresholds: tuple[float, ...]
    pos_flagged: tuple[int, ...]
    pos_total: int
    neg_triples_flagged: tuple[int, ...]
    neg_triples_total: int
    neg_keys_flagged: tuple[int, ...]
    neg_keys_total: int

    def curve(self) -> list[RocPoint]:
        if self.pos_total == 0 or self.neg_triples_total == 0:
            raise ValueError("rates undefined: no positive traces or no negative triples")
        return [
            RocPoint(t, p / self.pos_total, nt / self.neg_triples_total, nk / self.neg_keys_total)
            for t, p, nt, nk in zip(self.thresholds, self.pos_flagged, self.neg_triples_flagged, self.neg_keys_flagged)
        ]

    def __add__(self, other: "SweepCounts") -> "SweepCounts":
        if self.thresholds != other.thresholds:
            raise ValueError("cannot merge sweeps computed on different threshold grids")
        add = lambda a, b: tuple(x + y for x, y in zip(a, b))  # noqa: E731
        return SweepCounts(
            self.thresholds,
            add(self.pos_flagged, other.pos_flagged),
            self.pos_total + other.pos_total,
            add(self.neg_triples_flagged, other.neg_triples_flagged),
            self.neg_triples_total + other.neg_triples_total,
            add(self.neg_keys_flagged, other.neg_keys_flagged),
            self.neg_keys_total + other.neg_keys_total,
        )


def _check_grid(thresholds: Sequence[float]) -> np.ndarray:
    grid = np.asarray(thresholds, dtype=np.float64)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("threshold grid must be a non-empty 1-d sequence")
    if np.any(grid < 0) or np.any(np.diff(grid) < 0):
        raise ValueError("thresholds must be non-negative and sorted ascending")
    return grid


def _below(sorted_values: np.ndarray, grid: np.ndarray) -> tuple[int, ...]:
    # strict: a value equal to the threshold is not flagged
    return tuple(int(x) for x in np.searchsorted(sorted_values, grid, side="left"))


def trace_distances(trace: TraceSet, centroid: Sequence[float]) -> dict[str, np.ndarray]:
    """Squared distances of every sliding triple, per server key."""
    out = {}
    for key, sizes in group_sizes(trace.events).items():
        tri = triple_array(sizes)
        if len(tri):
            out[key] = distances_sq(tri, centroid)
    return out


def positive_minima(model: FamilyModel, positives: Iterable[TraceSet]) -> np.ndarray:
    """Closest triple per positive trace (inf for traces without a triple)."""
    mins = []
    for trace in positives:
        per_key = trace_distances(trace, model.centroid)
        mins.append(min((float(d.min()) for d in per_key.values()), default=np.inf))
    return np.asarray(mins, dtype=np.float64)


def negative_distances(model: FamilyModel, negatives: Iterable[TraceSet]) -> tuple[np.ndarray, np.ndarray]:
    """(all benign triple distances, per-key minimum distances)."""
    triples, key_mins = [], []
    for trace in negatives:
        for d in trace_distances(trace, model.centroid).values():
            triples.append(d)
            key_mins.append(d.min())
    all_d = np.concatenate(triples) if triples else np.empty(0)
    return all_d, np.asarray(key_mins, dtype=np.float64)


def sweep_counts(
    model: FamilyModel,
    positives: Sequence[TraceSet],
    negatives: Sequence[TraceSet],
    thresholds: Sequence[float],
) -> SweepCounts:
    grid = _check_grid(thresholds)
    pos = np.sort(positive_minima(model, positives))
    neg, neg_keys = negative_distances(model, negatives)
    if pos.size == 0:
        raise ValueError("sweep needs at least one positive trace")
    if neg.size == 0:
        raise ValueError("sweep needs at least one negative triple")
    return SweepCounts(
        thresholds=tuple(float(t) for t in grid),
        pos_flagged=_below(pos, grid),
        pos_total=int(pos.size),
        neg_triples_flagged=_below(np.sort(neg), grid),
        neg_triples_total=int(neg.size),
        neg_keys_flagged=_below(np.sort(neg_keys), grid),
        neg_keys_total=int(neg_keys.size),
    )


def sweep(model, positives, negatives, thresholds) -> list[RocPoint]:
    return sweep_counts(model, positives, negatives, thresholds).curve()


def merge_curves(a: SweepCounts, b: SweepCounts) -> list[RocPoint]:
    """Pool two sweeps on the same grid: counts are summed, then divided."""
    return (a + b).curve()


def default_threshold_grid(model: FamilyModel, steps: int = DEFAULT_GRID_STEPS) -> list[float]:
    """Evenly spaced limits from d_min_sq to 1.1 x d_max_sq.

    Both d_min_sq and d_max_sq are always present exactly, so the grid may
    hold ``steps + 1`` points.
    """
    lo, hi = float(model.d_min_sq), float(model.d_max_sq)
    if lo == hi:
        return sorted({0.0, hi, GRID_HEADROOM * hi})
    if steps < 2:
        raise ValueError("grid needs at least 2 steps")
    grid = set(np.linspace(lo, GRID_HEADROOM * hi, steps).tolist())
    grid.update((lo, hi))
    return sorted(grid)


class Policy(NamedTuple):
    kind: str  # youden_triples | youden_domains | manual
    value: Optional[float] = None

    def __str__(self) -> str:
        return f"manual:{self.value!r}" if self.kind == "manual" else self.kind.replace("_", "-")


def parse_policy(policy: Union[str, Policy]) -> Policy:
    if isinstance(policy, Policy):
        return policy
    text = policy.strip().lower().replace("_", "-")
    if text in ("youden-triples", "youden-domains"):
        return Policy(text.replace("-", "_"))
    if text.startswith("manual:"):
        try:
            return Policy("manual", float(text.split(":", 1)[1]))
        except ValueError:
            pass
    raise ValueError(f"unknown policy {policy!r}; use youden-triples, youden-domains or manual:<t>")


def select_threshold(curve: Sequence[RocPoint], policy: Union[str, Policy] = "youden-triples") -> float:
    """Pick the limit: maximum Youden J at the chosen granularity, or a manual value.

    J ties (within 1e-12) go to the smaller threshold, so the result does not
    depend on the order of ``curve``.
    """
    if not curve:
        raise ValueError("empty ROC curve")
    pol = parse_policy(policy)
    points = sorted(curve, key=lambda p: p.threshold_sq)
    if pol.kind == "manual":
        lo, hi = points[0].threshold_sq, points[-1].threshold_sq
        if not lo <= pol.value <= hi:
            warnings.warn(f"manual threshold {pol.value} lies outside the swept range [{lo}, {hi}]")
        return pol.value
    fpr = (lambda p: p.fpr_triples) if pol.kind == "youden_triples" else (lambda p: p.fpr_domains)
    best, best_j = None, -np.inf
    for p in points:
        j = p.tpr - fpr(p)
        if j > best_j + 1e-12:
            best, best_j = p, j
    return best.threshold_sq


def point_at(curve: Sequence[RocPoint], threshold: float) -> Optional[RocPoint]:
    for p in curve:
        if p.threshold_sq == threshold:
            return p
    return None


def roc_csv(curve: Iterable[RocPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROC_HEADER)
    for p in curve:
        w.writerow([repr(float(x)) for x in p])
    return buf.getvalue()


def write_roc_csv(path: Union[str, Path], curve: Iterable[RocPoint]) -> None:
    Path(path).write_text(roc_csv(curve), encoding="utf-8")


def read_roc_csv(path: Union[str, Path]) -> list[RocPoint]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != ROC_HEADER:
        raise ValueError(f"{path}: missing ROC header")
    return [RocPoint(*(float(x) for x in row)) for row in rows[1:]]


@dataclass
class TuneResult:
    model: FamilyModel
    counts: SweepCounts
    curve: list[RocPoint]
    threshold_sq: float
    point: Optional[RocPoint]


def tune(
    model: FamilyModel,
    positives: Sequence[TraceSet],
    negatives: Sequence[TraceSet],
    policy: Union[str, Policy] = "youden-triples",
    steps: int = DEFAULT_GRID_STEPS,
    provenance: Optional[dict] = None,
) -> TuneResult:
    """Sweep the default grid, choose a limit and return a new tuned model."""
    model.validate()
    grid = default_threshold_grid(model, steps)
    counts = sweep_counts(model, positives, negatives, grid)
    curve = counts.curve()
    pol = parse_policy(policy)
    t = select_threshold(curve, pol)
    prov = {
        "grid": {"min": grid[0], "max": grid[-1], "points": len(grid), "steps": steps},
        "policy": str(pol),
    }
    if provenance:
        prov.update(provenance)
    point = point_at(curve, t)
    if point is None:
        # manual limit off-grid: evaluate it directly
        point = sweep_counts(model, positives, negatives, [t]).curve()[0]
    return TuneResult(model.with_limit(t, prov), counts, curve, t, point)
