"""Label assignment: task-aligned (TAL) and SimOTA matching with soft targets.

Both assigners pick, for every ground truth, ``top_k`` candidate anchors
ranked by a quality measure (highest alignment metric for TAL, lowest cost
for SimOTA).  An anchor selected by several truths is kept by the truth it
overlaps best (highest CIoU).  Soft classification targets then scale the
truth's multi-hot class vector by a per-anchor quality in [0, 1].
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geom import BoxXYXY, ciou
from .pyramid import AnchorGrid, PredictionSet

log = logging.getLogger(__name__)

TAL = "tal"
SIMOTA = "simota"
LAMBDA_FLOOR = 1e-8
_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class GroundTruth:
    box: BoxXYXY
    classes: np.ndarray

    def __post_init__(self):
        box = BoxXYXY(*map(float, self.box)).validate()
        if box.area <= 0:
            raise ValueError(f"ground-truth box must have positive area, got {tuple(box)}")
        classes = np.asarray(self.classes, dtype=np.float64)
        if classes.ndim != 1 or not np.all((classes == 0) | (classes == 1)) or classes.sum() < 1:
            raise ValueError("classes must be a multi-hot vector with at least one class set")
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "classes", classes)

    @classmethod
    def single(cls, box, class_id: int, num_classes: int) -> "GroundTruth":
        y = np.zeros(num_classes)
        y[class_id] = 1.0
        return cls(box, y)


@dataclass(frozen=True)
class AssignConfig:
    mode: str = TAL
    top_k: int = 10
    dynamic_k: bool = False
    tal_alpha: float = 0.5
    tal_beta: float = 6.0
    simota_alpha: float = 3.0
    radius: float = 2.5

    def __post_init__(self):
        if self.mode not in (TAL, SIMOTA):
            raise ValueError(f"unknown assignment mode {self.mode!r}")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if min(self.tal_alpha, self.tal_beta, self.simota_alpha) <= 0:
            raise ValueError("metric exponents must be positive")
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.dynamic_k and self.mode != SIMOTA:
            raise ValueError("dynamic_k is only defined for SimOTA")


@dataclass
class Assignment:
    """Per-anchor matching result.

    ``matched_gt`` holds the truth index or -1; ``score`` is the TAL metric or
    SimOTA cost of the matched pair (NaN on unmatched anchors).
    """

    matched_gt: np.ndarray
    cls_target: np.ndarray
    box_target: np.ndarray
    mode: str
    score: np.ndarray
    top_k: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    unmatched_truths: list[int] = field(default_factory=list)

    @property
    def fg_mask(self) -> np.ndarray:
        return self.matched_gt >= 0

    @property
    def num_fg(self) -> int:
        return int(self.fg_mask.sum())

    @classmethod
    def empty(cls, num_anchors: int, num_classes: int, mode: str) -> "Assignment":
        return cls(
            matched_gt=np.full(num_anchors, -1, dtype=np.int64),
            cls_target=np.zeros((num_anchors, num_classes)),
            box_target=np.full((num_anchors, 4), np.nan),
            mode=mode,
            score=np.full(num_anchors, np.nan),
        )


def candidate_mask(grid: AnchorGrid, truth: GroundTruth, radius: float) -> np.ndarray:
    """Anchors centred strictly inside the box and within ``radius`` strides of its centre."""
    x1, y1, x2, y2 = truth.box
    cx, cy = grid.points[:, 0], grid.points[:, 1]
    inside = (cx > x1) & (cx < x2) & (cy > y1) & (cy < y2)
    dist = np.hypot(cx - (x1 + x2) / 2.0, cy - (y1 + y2) / 2.0)
    return inside & (dist <= radius * grid.strides)


def class_score(probs: np.ndarray, classes: np.ndarray) -> np.ndarray:
    """Mean predicted probability over the truth's positive classes."""
    pos = np.asarray(classes) > 0
    return np.mean(np.asarray(probs)[..., pos], axis=-1)


def tal_metric(probs, similarity, classes, alpha: float = 0.5, beta: float = 6.0) -> np.ndarray:
    return class_score(probs, classes) ** alpha * np.asarray(similarity) ** beta


def prob_bce(q, y) -> np.ndarray:
    """Elementwise BCE of probability ``q`` against target ``y`` (0*log 0 = 0)."""
    q = np.asarray(q, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    log_q = np.log(np.maximum(q, _PROB_FLOOR))
    log_1q = np.log(np.maximum(1.0 - q, _PROB_FLOOR))
    pos = np.where(y != 0, y * log_q, 0.0)
    neg = np.where(y != 1, (1.0 - y) * log_1q, 0.0)
    return -(pos + neg)


def simota_cost(probs, similarity, classes, alpha: float = 3.0) -> np.ndarray:
    """``sum_c BCE(lambda * p_c, y_c) - alpha * log(lambda)`` with lambda floored at 1e-8."""
    lam = np.clip(np.asarray(similarity, dtype=np.float64), LAMBDA_FLOOR, 1.0)
    return np.sum(prob_bce(lam[..., None] * np.asarray(probs), classes), axis=-1) - alpha * np.log(lam)


def dynamic_top_k(similarity: np.ndarray, candidates: np.ndarray, n_est: int = 10) -> int:
    """``max(1, round(sum of the n_est highest candidate similarities))``."""
    sims = np.sort(similarity[candidates])[::-1][:n_est]
    return max(1, int(round(float(np.sum(sims)))))


def _ranked(values: np.ndarray, candidates: np.ndarray, k: int, largest: bool) -> np.ndarray:
    idx = np.flatnonzero(candidates)
    key = -values[idx] if largest else values[idx]
    # stable sort keeps lower anchor index first on ties
    return idx[np.argsort(key, kind="stable")[:k]]


def assign(
    grid: AnchorGrid,
    preds: PredictionSet,
    truths: Sequence[GroundTruth],
    cfg: AssignConfig,
    soft_labels: bool = True,
) -> Assignment:
    n, num_classes = len(preds), preds.num_classes
    if n != len(grid):
        raise ValueError(f"{n} predictions for {len(grid)} anchors")
    out = Assignment.empty(n, num_classes, cfg.mode)
    out.top_k = np.zeros(len(truths), dtype=np.int64)
    if not truths:
        return out

    boxes = preds.boxes(grid)
    probs = preds.probs()
    t = len(truths)
    raw = np.empty((t, n))
    sim = np.empty((t, n))
    score = np.empty((t, n))
    selected = np.zeros((t, n), dtype=bool)

    for j, gt in enumerate(truths):
        cv = ciou(boxes, gt.box.as_array())
        raw[j], sim[j] = cv.ciou, cv.similarity
        cand = candidate_mask(grid, gt, cfg.radius)
        if cfg.mode == TAL:
            score[j] = np.where(cand, tal_metric(probs, sim[j], gt.classes, cfg.tal_alpha, cfg.tal_beta), 0.0)
            k = cfg.top_k
        else:
            score[j] = simota_cost(probs, sim[j], gt.classes, cfg.simota_alpha)
            k = dynamic_top_k(sim[j], cand) if cfg.dynamic_k else cfg.top_k
        out.top_k[j] = k
        if not cand.any():
            out.unmatched_truths.append(j)
            log.info("truth %d %s covers no anchor centre", j, tuple(gt.box))
            continue
        selected[j, _ranked(score[j], cand, k, largest=cfg.mode == TAL)] = True

    claimed = selected.any(axis=0)
    # highest raw CIoU wins contested anchors; argmax picks the lowest truth index on ties
    winner = np.argmax(np.where(selected, raw, -np.inf), axis=0)
    out.matched_gt = np.where(claimed, winner, -1)

    for j, gt in enumerate(truths):
        members = np.flatnonzero(out.matched_gt == j)
        if members.size == 0:
            if j not in out.unmatched_truths:
                out.unmatched_truths.append(j)
            continue
        if not soft_labels:
            p = np.ones(members.size)
        elif cfg.mode == TAL:
            best_sim = sim[j, members].max()
            best_metric = score[j, members].max()
            p = (score[j, members] / best_metric) * best_sim if best_metric > 0 else np.zeros(members.size)
        else:
            p = sim[j, members]
        out.cls_target[members] = p[:, None] * gt.classes[None, :]
        out.box_target[members] = gt.box.as_array()
        out.score[members] = score[j, members]
    out.unmatched_truths.sort()
    return out


def write_assignment_csv(path, assignment: Assignment, grid: AnchorGrid) -> None:
    """One row per anchor: index, level, matched truth, metric/cost, max soft target."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["anchor", "level", "matched_gt", "score", "soft_target_max"])
        for a in range(len(grid)):
            s = assignment.score[a]
            w.writerow([
                a,
                f"lv{int(grid.levels[a]) + 1}",
                int(assignment.matched_gt[a]),
                "" if math.isnan(s) else f"{s:.6f}",
                f"{assignment.cls_target[a].max(initial=0.0):.6f}",
            ])
