"""Same-different evaluation, precision-recall curves and average precision."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .detection import ReferencePool, score_segments
from .errors import DataError
from .features import SegmentFeatures
from .rae import RaeModel, embed_all
from .rng import EVAL_PAIRS, make_rng
from .siamese import similarity_rows


class ScoredPair(NamedTuple):
    pair_id: int | str
    score: float  # similarity, higher means "same"
    label: int  # 1 same / typical, 0 different / disordered


class PRPoint(NamedTuple):
    threshold: float
    precision: float
    recall: float


class EvalPair(NamedTuple):
    eval_index: int
    ref_index: int
    label: int


def _ranked(scored: Sequence[ScoredPair]) -> list[ScoredPair]:
    for p in scored:
        if not np.isfinite(p.score):
            raise ValueError(f"pair {p.pair_id!r} has a non-finite score")
    return sorted(scored, key=lambda p: (-p.score, p.pair_id))


def pr_curve(scored: Sequence[ScoredPair]) -> list[PRPoint]:
    """One point per distinct score, thresholds from high to low.

    Tied scores enter together since no threshold can separate them.
    """
    ranked = _ranked(scored)
    n_pos = sum(1 for p in ranked if p.label == 1)
    if n_pos == 0:
        raise ValueError("precision-recall needs at least one positive pair")
    points = []
    tp = fp = 0
    for i, p in enumerate(ranked):
        if p.label == 1:
            tp += 1
        else:
            fp += 1
        if i + 1 == len(ranked) or ranked[i + 1].score != p.score:
            points.append(PRPoint(p.score, tp / (tp + fp), tp / n_pos))
    return points


def average_precision(scored: Sequence[ScoredPair]) -> float:
    """Step-wise AP: sum of precision times recall increment over the PR points."""
    ap = 0.0
    prev_recall = 0.0
    for pt in pr_curve(scored):
        ap += (pt.recall - prev_recall) * pt.precision
        prev_recall = pt.recall
    return ap


def average_precision_arrays(scores, labels) -> float:
    return average_precision([ScoredPair(i, float(s), int(y)) for i, (s, y) in enumerate(zip(scores, labels))])


def make_same_different_pairs(
    eval_segments: Sequence[SegmentFeatures], reference_segments: Sequence[SegmentFeatures], seed: int
) -> list[EvalPair]:
    """Pair every evaluation segment with one uniformly drawn reference segment."""
    if not eval_segments or not reference_segments:
        raise DataError("same-different pairing needs non-empty evaluation and reference sets")
    rng = make_rng(seed, EVAL_PAIRS)
    picks = rng.integers(len(reference_segments), size=len(eval_segments))
    return [
        EvalPair(i, int(j), int(eval_segments[i].label == reference_segments[j].label))
        for i, j in enumerate(picks)
    ]


@dataclass
class ApReport:
    pooled: float
    per_class: dict[str, float]
    n_pairs: int
    positive_rate: float
    scored: list[ScoredPair] = field(repr=False, default_factory=list)

    def to_dict(self) -> dict:
        return {
            "pooled_ap": self.pooled,
            "per_class_ap": self.per_class,
            "n_pairs": self.n_pairs,
            "positive_rate": self.positive_rate,
        }


def _per_class_ap(scored: Sequence[ScoredPair], classes: Sequence[str]) -> dict[str, float]:
    out = {}
    for c in sorted(set(classes)):
        sub = [p for p, k in zip(scored, classes) if k == c]
        out[c] = average_precision(sub) if any(p.label for p in sub) else float("nan")
    return out


def artificial_error_experiment(
    model: RaeModel,
    eval_segments: Sequence[SegmentFeatures],
    reference_segments: Sequence[SegmentFeatures],
    seed: int,
    batch_size: int = 256,
) -> ApReport:
    """AP of cosine similarity on random eval/reference pairs; different-class pairs are the errors.

    Per-class AP groups pairs by the evaluation segment's class; a class
    without any same-class pair reports NaN.
    """
    pairs = make_same_different_pairs(eval_segments, reference_segments, seed)
    z_eval = embed_all(model, list(eval_segments), batch_size).astype(np.float64)
    z_ref = embed_all(model, list(reference_segments), batch_size).astype(np.float64)
    a = z_eval[[p.eval_index for p in pairs]]
    b = z_ref[[p.ref_index for p in pairs]]
    sim = similarity_rows(a, b)
    scored = [ScoredPair(i, float(s), p.label) for i, (s, p) in enumerate(zip(sim, pairs))]
    if not any(p.label for p in scored):
        raise DataError("no same-class pairs were drawn; AP is undefined")
    classes = [eval_segments[p.eval_index].label for p in pairs]
    return ApReport(
        average_precision(scored), _per_class_ap(scored, classes), len(scored), float(np.mean([p.label for p in pairs])), scored
    )


@dataclass
class ConsonantRow:
    consonant: str
    n_disordered: int
    n_typical: int
    n_reference: int
    ap: float


@dataclass
class ErrorTable:
    rows: list[ConsonantRow]
    pooled: float
    scored: list[ScoredPair] = field(repr=False, default_factory=list)

    def to_dict(self) -> dict:
        return {"pooled_ap": self.pooled, "rows": [vars(r) for r in self.rows]}

    def format(self) -> str:
        lines = [f"{'consonant':<12}{'disordered':>11}{'typical':>9}{'reference':>11}{'AP':>8}"]
        for r in self.rows:
            lines.append(f"{r.consonant:<12}{r.n_disordered:>11}{r.n_typical:>9}{r.n_reference:>11}{r.ap:>8.3f}")
        lines.append(f"{'pooled':<43}{self.pooled:>8.3f}")
        return "\n".join(lines)


def real_error_experiment(
    model: RaeModel,
    test_segments: Sequence[SegmentFeatures],
    typical: Sequence[bool],
    pool: ReferencePool,
    batch_size: int = 256,
) -> ErrorTable:
    """Per-consonant AP of pool scores with typical segments as positives.

    ``test_segments[i].label`` names the expected consonant; ``typical[i]`` is
    the ground-truth judgement for that production.
    """
    if len(test_segments) != len(typical):
        raise ValueError("test_segments and typical must have equal length")
    missing = sorted({s.label for s in test_segments} - set(pool.ids))
    if missing:
        raise DataError(f"reference pool lacks classes {missing}")
    results = score_segments(model, test_segments, pool, batch_size)
    scored = [ScoredPair(i, r.score, int(bool(t))) for i, (r, t) in enumerate(zip(results, typical))]
    rows = []
    for c in sorted({s.label for s in test_segments}):
        sub = [p for p, s in zip(scored, test_segments) if s.label == c]
        n_typ = sum(p.label for p in sub)
        ap = average_precision(sub) if n_typ else float("nan")
        rows.append(ConsonantRow(c, len(sub) - n_typ, n_typ, len(pool.ids[c]), ap))
    pooled = average_precision(scored) if any(p.label for p in scored) else float("nan")
    return ErrorTable(rows, pooled, scored)


def write_pr_data(path: str | Path, points: Sequence[PRPoint]) -> None:
    """Tab-separated (threshold, precision, recall) rows for external plotting."""
    with open(path, "w") as fh:
        fh.write("threshold\tprecision\trecall\n")
        for p in points:
            fh.write(f"{p.threshold!r}\t{p.precision!r}\t{p.recall!r}\n")
