"""Learning phase: one POST triple per infection trace, then a family centroid."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .detector import FamilyModel, distances_sq
from .tracker import Triple
from .traces import TraceSet

log = logging.getLogger(__name__)


class InsufficientPosts(ValueError):
    pass


@dataclass(frozen=True)
class LearningSample:
    trace_id: str
    triple: Triple


def extract_learning_sample(trace: TraceSet) -> LearningSample:
    """First three POST sizes sent to the server that received the trace's first POST."""
    if not trace.events:
        raise InsufficientPosts(f"{trace.trace_id}: no POST requests")
    key = trace.events[0].server_key
    sizes = [ev.size for ev in trace.events if ev.server_key == key][:3]
    if len(sizes) < 3:
        raise InsufficientPosts(f"{trace.trace_id}: only {len(sizes)} POST(s) to {key}")
    return LearningSample(trace.trace_id, Triple(*sizes))


def fit(samples: Sequence[LearningSample], family: str, created: Optional[str] = None) -> FamilyModel:
    """Centroid = component-wise mean; d_min_sq/d_max_sq over the samples.

    The limit is left unset; the tuner fills it in.
    """
    if not samples:
        raise ValueError("cannot fit a model without samples")
    pts = np.array([s.triple for s in samples], dtype=np.float64)
    centroid = pts.mean(axis=0)
    d = distances_sq(pts, centroid)
    return FamilyModel(
        family=family,
        centroid=tuple(float(x) for x in centroid),
        d_min_sq=float(d.min()),
        d_max_sq=float(d.max()),
        trained_on=len(samples),
        created=created,
    ).validate()


@dataclass
class TrainingResult:
    model: FamilyModel
    samples: list[LearningSample]
    rejected: list[str] = field(default_factory=list)


def train(traces: Iterable[TraceSet], family: str, created: Optional[str] = None) -> TrainingResult:
    """Extract samples from every trace labeled ``family`` and fit.

    Traces with fewer than three POSTs are reported in ``rejected`` and
    logged, never dropped silently.
    """
    samples, rejected = [], []
    for trace in traces:
        if trace.label != family:
            continue
        try:
            samples.append(extract_learning_sample(trace))
        except InsufficientPosts as exc:
            log.warning("rejected training trace %s", exc)
            rejected.append(str(exc))
    if not samples:
        raise ValueError(f"no usable {family} traces ({len(rejected)} rejected)")
    return TrainingResult(fit(samples, family, created), samples, rejected)
