"""Reference-pool scoring of test segments and the typical/disordered decision.

A test segment's score is the mean cosine similarity between its embedding and
every reference embedding of the expected phone class, so a higher score means
closer to typical. A segment is typical when ``score >= threshold``.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import container
from .errors import DataError
from .features import SegmentFeatures
from .rae import RaeModel, embed_all, encode
from .siamese import similarity_rows

TYPICAL = "typical"
DISORDERED = "disordered"


@dataclass
class ReferencePool:
    """Per-class reference ids and their (n, D) embedding matrices."""

    ids: dict[str, list[str]] = field(default_factory=dict)
    embeddings: dict[str, np.ndarray] = field(default_factory=dict)

    def sizes(self) -> dict[str, int]:
        return {c: len(v) for c, v in self.ids.items()}

    def classes(self) -> list[str]:
        return sorted(self.ids)


@dataclass(frozen=True)
class DetectionResult:
    segment_id: str
    phone_class: str
    score: float
    per_reference: tuple[tuple[str, float], ...]
    threshold: float | None = None
    decision: str | None = None

    def to_dict(self) -> dict:
        return {
            "segment_id": self.segment_id,
            "phone_class": self.phone_class,
            "score": self.score,
            "threshold": self.threshold,
            "decision": self.decision,
            "per_reference": [[r, d] for r, d in self.per_reference],
        }


def build_reference_pool(model: RaeModel, segments: Sequence[SegmentFeatures], batch_size: int = 256) -> ReferencePool:
    seen = set()
    for s in segments:
        if s.segment_id in seen:
            raise DataError(f"duplicate reference segment id {s.segment_id!r}")
        seen.add(s.segment_id)
    z = embed_all(model, list(segments), batch_size).astype(np.float64)
    pool = ReferencePool()
    for label in sorted({s.label for s in segments}):
        idx = [i for i, s in enumerate(segments) if s.label == label]
        pool.ids[label] = [segments[i].segment_id for i in idx]
        pool.embeddings[label] = z[idx]
    return pool


def save_pool(path: str | Path, pool: ReferencePool) -> None:
    header = {"kind": "pool", "ids": pool.ids}
    tensors = {f"class.{c}": pool.embeddings[c] for c in pool.classes()}
    container.save(path, header, tensors, {k: "<f8" for k in tensors})


def load_pool(path: str | Path) -> ReferencePool:
    header, tensors = container.load(path)
    if header.get("kind") != "pool":
        raise DataError(f"{path}: not a reference pool")
    ids = {c: list(v) for c, v in header["ids"].items()}
    return ReferencePool(ids, {c: tensors[f"class.{c}"] for c in ids})


def score_embedding(z: np.ndarray, pool: ReferencePool, phone_class: str, segment_id: str = "") -> DetectionResult:
    if phone_class not in pool.ids:
        raise DataError(f"phone class {phone_class!r} not in reference pool")
    refs = pool.embeddings[phone_class]
    if refs.shape[0] == 0:
        raise DataError(f"reference pool for {phone_class!r} is empty")
    cos = similarity_rows(refs, np.asarray(z, dtype=np.float64)[None, :])
    per_ref = tuple((rid, float(1.0 - c)) for rid, c in zip(pool.ids[phone_class], cos))
    return DetectionResult(segment_id, phone_class, float(np.mean(cos)), per_ref)


def score_segment(model: RaeModel, segment: SegmentFeatures, pool: ReferencePool, phone_class: str | None = None) -> DetectionResult:
    """Score ``segment`` against the references of ``phone_class`` (default: the segment's own label)."""
    cls = segment.label if phone_class is None else phone_class
    return score_embedding(encode(model, segment), pool, cls, segment.segment_id)


def score_segments(model: RaeModel, segments: Sequence[SegmentFeatures], pool: ReferencePool, batch_size: int = 256) -> list[DetectionResult]:
    z = embed_all(model, list(segments), batch_size)
    return [score_embedding(zi, pool, s.label, s.segment_id) for zi, s in zip(z, segments)]


def classify(result: DetectionResult, threshold: float) -> DetectionResult:
    """Typical iff score >= threshold (a score equal to the threshold is typical)."""
    if not -1.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [-1, 1], got {threshold}")
    return replace(result, threshold=threshold, decision=TYPICAL if result.score >= threshold else DISORDERED)


def calibrate_threshold(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Threshold maximizing F1 of the typical class (label 1) over midpoints of adjacent distinct scores.

    Ties go to the larger threshold. With a single distinct score the only
    candidate is that score itself.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape or s.size == 0:
        raise ValueError("scores and labels must be non-empty and equally long")
    if y.min() == y.max():
        raise ValueError("calibration needs both typical and disordered examples")
    uniq = np.unique(s)
    if uniq.size == 1:
        return float(uniq[0])
    cands = (uniq[:-1] + uniq[1:]) / 2.0
    pos = y.sum()
    # predicted typical when s >= cand <=> s >= uniq[k + 1]
    desc = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[desc], y[desc]
    tp_cum = np.cumsum(y_sorted)
    n_at_least = np.searchsorted(-s_sorted, -uniq[1:], side="right")
    tp = tp_cum[n_at_least - 1]
    f1 = 2.0 * tp / (n_at_least + pos)
    best = np.flatnonzero(f1 == f1.max())[-1]
    return float(cands[best])
