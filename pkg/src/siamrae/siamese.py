"""Siamese training of the recurrent autoencoder.

Distances follow the two conventions used by the losses: the contrastive loss
uses ``d = 1 - cos`` while the triplet loss uses ``d = 0.5 * (1 - cos)``.
All branches of a pair or triplet run through one batched forward pass of the
same model, so parameters are shared by construction and gradients from every
branch accumulate into a single gradient dictionary.
"""

from __future__ import annotations

import json
import logging
import math
import time
from collections import defaultdict
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .checkpoint import load_parameters_into, save_checkpoint
from .errors import NumericFailure
from .features import Normalizer, SegmentFeatures
from .rae import RaeModel, backward, forward, reconstruction_losses
from .rng import PAIRS, SHUFFLE, TRIPLETS, make_rng

log = logging.getLogger(__name__)

DEFAULT_MARGIN = {"contrastive": 0.9, "triplet": 0.25}


# --- distances and losses --------------------------------------------------


def similarity_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine as ``1 - |a/|a| - b/|b||^2 / 2``: exactly 1 for identical rows."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if not (np.all(na > 0) and np.all(nb > 0)):
        raise ValueError("cosine distance is undefined for a zero vector")
    diff = a / na - b / nb
    return np.clip(1.0 - 0.5 * np.sum(diff * diff, axis=1), -1.0, 1.0)


def cosine_similarity(z1, z2) -> float:
    z1, z2 = np.asarray(z1, dtype=np.float64), np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape or z1.ndim != 1:
        raise ValueError(f"dimension mismatch {z1.shape} vs {z2.shape}")
    return float(similarity_rows(z1, z2)[0])


def cosine_distance(z1, z2) -> float:
    return 1.0 - cosine_similarity(z1, z2)


def half_cosine_distance(z1, z2) -> float:
    return 0.5 * (1.0 - cosine_similarity(z1, z2))


def cosine_rows(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise cosine and its gradients with respect to ``a`` and ``b``."""
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    c = np.sum(a * b, axis=1, keepdims=True) / (na * nb)
    da = b / (na * nb) - c * a / (na * na)
    db = a / (na * nb) - c * b / (nb * nb)
    return c[:, 0], da, db


def contrastive_rows(z1, z2, y, margin):
    """Per-row contrastive loss and gradients (loss, dz1, dz2)."""
    y = np.asarray(y, dtype=z1.dtype)
    c, dc1, dc2 = cosine_rows(z1, z2)
    d = 1.0 - c
    hinge = margin - d
    loss = 0.5 * y * d + 0.5 * (1.0 - y) * np.maximum(0.0, hinge)
    # subgradient 0 at the kink
    dl_dd = 0.5 * y - 0.5 * (1.0 - y) * (hinge > 0)
    dl_dc = -dl_dd[:, None]
    return loss, dl_dc * dc1, dl_dc * dc2


def triplet_rows(za, zp, zn, margin):
    """Per-row triplet loss and gradients (loss, dza, dzp, dzn)."""
    c_ap, da_ap, dp = cosine_rows(za, zp)
    c_an, da_an, dn = cosine_rows(za, zn)
    arg = margin + 0.5 * (1.0 - c_ap) - 0.5 * (1.0 - c_an)
    active = (arg > 0).astype(za.dtype)[:, None]
    loss = np.maximum(0.0, arg)
    g_ap, g_an = -0.5 * active, 0.5 * active
    return loss, g_ap * da_ap + g_an * da_an, g_ap * dp, g_an * dn


def contrastive_loss(z1, z2, y: int, margin: float) -> float:
    if y not in (0, 1):
        raise ValueError("y must be 0 or 1")
    d = cosine_distance(z1, z2)
    return 0.5 * y * d + 0.5 * (1 - y) * max(0.0, margin - d)


def triplet_loss(za, zp, zn, margin: float) -> float:
    return max(0.0, margin + half_cosine_distance(za, zp) - half_cosine_distance(za, zn))


def combined_contrastive(l_c, l_mse1, l_mse2, w: float):
    return (1.0 - w) * l_c + w * (l_mse1 + l_mse2) / 2.0


def combined_triplet(l_t, l_mse_a, l_mse_p, l_mse_n, w: float):
    return (1.0 - w) * l_t + w * (l_mse_a + l_mse_p + l_mse_n) / 3.0


# --- sampling --------------------------------------------------------------


class SegmentPair(NamedTuple):
    first: int
    second: int
    y: int  # 1 when both segments share a phone class


class SegmentTriplet(NamedTuple):
    anchor: int
    positive: int
    negative: int


def _class_index(dataset: Sequence[SegmentFeatures]):
    members: dict[str, list[int]] = defaultdict(list)
    for i, s in enumerate(dataset):
        members[s.label].append(i)
    members_arr = {c: np.array(v) for c, v in members.items()}
    position = {}
    for c, idx in members_arr.items():
        for pos, i in enumerate(idx):
            position[i] = pos
    labels = np.array([s.label for s in dataset])
    others = {c: np.flatnonzero(labels != c) for c in members_arr}
    return members_arr, position, others


def _check_sampleable(members):
    if len(members) < 2:
        raise ValueError("sampling needs at least 2 phone classes")
    if not any(len(v) >= 2 for v in members.values()):
        raise ValueError("sampling needs a class with at least 2 segments")


def _same_class_partner(rng, members, pos):
    k = int(rng.integers(len(members) - 1))
    return int(members[k if k < pos else k + 1])


def sample_pairs(dataset: Sequence[SegmentFeatures], k: int, seed: int, same_fraction: float = 0.5) -> list[SegmentPair]:
    """Each segment starts ``k`` pairs; the partner is same-class with probability ``same_fraction``.

    Segments whose class has a single member cannot form same-class pairs and
    are skipped (a warning reports how many).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    members, position, others = _class_index(dataset)
    _check_sampleable(members)
    rng = make_rng(seed, PAIRS)
    pairs: list[SegmentPair] = []
    skipped = 0
    for i, seg in enumerate(dataset):
        cls = members[seg.label]
        if len(cls) < 2:
            skipped += 1
            continue
        for _ in range(k):
            if rng.random() < same_fraction:
                pairs.append(SegmentPair(i, _same_class_partner(rng, cls, position[i]), 1))
            else:
                pool = others[seg.label]
                pairs.append(SegmentPair(i, int(pool[rng.integers(len(pool))]), 0))
    if skipped:
        log.warning("sample_pairs: skipped %d segments from single-member classes", skipped)
    return pairs


def sample_triplets(dataset: Sequence[SegmentFeatures], k: int, seed: int) -> list[SegmentTriplet]:
    """Each segment anchors ``k`` triplets with a uniform same-class positive and other-class negative."""
    if k < 1:
        raise ValueError("k must be >= 1")
    members, position, others = _class_index(dataset)
    _check_sampleable(members)
    rng = make_rng(seed, TRIPLETS)
    out: list[SegmentTriplet] = []
    skipped = 0
    for i, seg in enumerate(dataset):
        cls = members[seg.label]
        if len(cls) < 2:
            skipped += 1
            continue
        pool = others[seg.label]
        for _ in range(k):
            pos = _same_class_partner(rng, cls, position[i])
            out.append(SegmentTriplet(i, pos, int(pool[rng.integers(len(pool))])))
    if skipped:
        log.warning("sample_triplets: skipped %d anchors from single-member classes", skipped)
    return out


# --- training --------------------------------------------------------------


@dataclass
class TrainConfig:
    loss_kind: str = "triplet"
    margin: float | None = None  # None picks the per-loss default
    loss_weight: float = 0.5
    pairs_per_segment: int = 5
    batch_size: int = 256
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 50
    correspondence: bool = False
    warm_start_checkpoint: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.loss_kind not in DEFAULT_MARGIN:
            raise ValueError(f"loss_kind must be one of {sorted(DEFAULT_MARGIN)}, got {self.loss_kind!r}")
        if self.margin is None:
            self.margin = DEFAULT_MARGIN[self.loss_kind]
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if not 0.0 <= self.loss_weight <= 1.0:
            raise ValueError("loss_weight must lie in [0, 1]")
        if self.pairs_per_segment < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("pairs_per_segment, batch_size and epochs must be >= 1")
        if self.correspondence and not self.warm_start_checkpoint:
            raise ValueError("correspondence training starts from a pre-trained Siamese RAE: set warm_start_checkpoint")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepResult:
    total: float
    siamese: float
    mse: float
    grads: dict[str, np.ndarray]


def _frames_of(dataset, idx):
    return [dataset[i].frames for i in idx]


def pair_step(
    model: RaeModel, dataset, pairs: Sequence[SegmentPair], margin: float, w: float, correspondence: bool = False
) -> StepResult:
    """Batch-mean combined contrastive/reconstruction loss and its gradients."""
    first = [p.first for p in pairs]
    second = [p.second for p in pairs]
    y = np.array([p.y for p in pairs])
    inputs = _frames_of(dataset, first + second)
    if correspondence:
        # same-class pairs reconstruct their partner, different-class pairs themselves
        tgt_first = [b if yy else a for a, b, yy in zip(first, second, y)]
        tgt_second = [a if yy else b for a, b, yy in zip(first, second, y)]
        targets = _frames_of(dataset, tgt_first + tgt_second)
    else:
        targets = inputs
    fwd = forward(model, inputs, [t.shape[0] for t in targets])
    per_item, drecon = reconstruction_losses(model, fwd, targets)
    n = len(pairs)
    z1, z2 = fwd.z[:n], fwd.z[n:]
    l_c, dz1, dz2 = contrastive_rows(z1, z2, y, margin)
    l_mse = (per_item[:n] + per_item[n:]) / 2.0
    total = combined_contrastive(l_c, per_item[:n], per_item[n:], w)
    dz = None if w == 1.0 else np.concatenate([dz1, dz2]) * ((1.0 - w) / n)
    grads = backward(model, fwd, dz=dz, drecon=drecon * (w / (2.0 * n)))
    return StepResult(float(total.mean()), float(l_c.mean()), float(l_mse.mean()), grads)


def triplet_step(
    model: RaeModel, dataset, triplets: Sequence[SegmentTriplet], margin: float, w: float, correspondence: bool = False
) -> StepResult:
    """Batch-mean combined triplet/reconstruction loss and its gradients."""
    a = [t.anchor for t in triplets]
    p = [t.positive for t in triplets]
    ng = [t.negative for t in triplets]
    inputs = _frames_of(dataset, a + p + ng)
    # anchor and positive share a class, so under correspondence they swap targets
    targets = _frames_of(dataset, p + a + ng) if correspondence else inputs
    fwd = forward(model, inputs, [t.shape[0] for t in targets])
    per_item, drecon = reconstruction_losses(model, fwd, targets)
    n = len(triplets)
    l_t, dza, dzp, dzn = triplet_rows(fwd.z[:n], fwd.z[n : 2 * n], fwd.z[2 * n :], margin)
    m_a, m_p, m_n = per_item[:n], per_item[n : 2 * n], per_item[2 * n :]
    total = combined_triplet(l_t, m_a, m_p, m_n, w)
    dz = None if w == 1.0 else np.concatenate([dza, dzp, dzn]) * ((1.0 - w) / n)
    grads = backward(model, fwd, dz=dz, drecon=drecon * (w / (3.0 * n)))
    return StepResult(float(total.mean()), float(l_t.mean()), float(((m_a + m_p + m_n) / 3.0).mean()), grads)


class Adam:
    """Adam with decoupled weight decay: parameters shrink by ``lr * weight_decay``
    each step independently of the moment estimates."""

    def __init__(self, params: dict[str, np.ndarray], lr=1e-4, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.weight_decay, self.betas, self.eps = lr, weight_decay, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p *= 1.0 - self.lr * self.weight_decay
            p -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


def _check_finite(res: StepResult, epoch: int, batch: int) -> None:
    if not math.isfinite(res.total):
        raise NumericFailure(
            f"non-finite loss at epoch {epoch} batch {batch}: total={res.total} siamese={res.siamese} mse={res.mse}"
        )
    for k, g in res.grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericFailure(f"non-finite gradient for {k} at epoch {epoch} batch {batch}")


def train(
    model: RaeModel,
    dataset: Sequence[SegmentFeatures],
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    normalizer: Normalizer | None = None,
) -> tuple[RaeModel, list[dict]]:
    """Train a copy of ``model``; returns it with one history record per epoch.

    When ``out_dir`` is given it receives ``train_config.json``, a
    ``history.jsonl`` line per epoch and ``last.ckpt`` rewritten each epoch.
    """
    model = model.copy()
    if cfg.warm_start_checkpoint:
        load_parameters_into(model, cfg.warm_start_checkpoint)
    if cfg.loss_kind == "contrastive":
        items = sample_pairs(dataset, cfg.pairs_per_segment, cfg.seed)
        step = pair_step
    else:
        items = sample_triplets(dataset, cfg.pairs_per_segment, cfg.seed)
        step = triplet_step
    if not items:
        raise ValueError("no training pairs could be formed")
    opt = Adam(model.params, cfg.learning_rate, cfg.weight_decay)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        (out / "history.jsonl").write_text("")
    history = []
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = make_rng(cfg.seed, SHUFFLE, epoch).permutation(len(items))
        sums = np.zeros(3)
        for b, lo in enumerate(range(0, len(items), cfg.batch_size)):
            batch = [items[i] for i in order[lo : lo + cfg.batch_size]]
            res = step(model, dataset, batch, cfg.margin, cfg.loss_weight, cfg.correspondence)
            _check_finite(res, epoch, b)
            opt.step(model.params, res.grads)
            sums += len(batch) * np.array([res.total, res.siamese, res.mse])
        mean = sums / len(items)
        rec = {
            "epoch": epoch,
            "loss_total": float(mean[0]),
            "loss_siamese": float(mean[1]),
            "loss_mse": float(mean[2]),
            "wall_time": round(time.perf_counter() - start, 3),
        }
        history.append(rec)
        log.info("epoch %d total=%.5f siamese=%.5f mse=%.5f", epoch, *mean)
        if out is not None:
            with open(out / "history.jsonl", "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            save_checkpoint(out / "last.ckpt", model, normalizer, {"epoch": epoch, "train_config": cfg.to_dict()})
    return model, history
