"""Frame-level mean average precision at IoU 0.5 (all-point interpolation)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .geom import iou
from .postprocess import Detection

EVAL_IOU = 0.5


@dataclass
class ClassStats:
    ap: float
    tp: int
    fp: int
    num_gt: int
    num_det: int


@dataclass
class EvalResult:
    per_class: dict[int, ClassStats]
    num_classes: int

    @property
    def ap(self) -> np.ndarray:
        """AP per class; NaN for classes without ground truth."""
        out = np.full(self.num_classes, np.nan)
        for c, s in self.per_class.items():
            if s.num_gt > 0:
                out[c] = s.ap
        return out

    @property
    def map(self) -> float:
        vals = [s.ap for s in self.per_class.values() if s.num_gt > 0]
        return float(np.mean(vals)) if vals else float("nan")

    def mean_ap(self, classes: Sequence[int]) -> float:
        vals = [self.per_class[c].ap for c in classes if self.per_class[c].num_gt > 0]
        return float(np.mean(vals)) if vals else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class_id", "AP", "num_gt", "num_det"])
            for c in range(self.num_classes):
                s = self.per_class[c]
                ap = f"{s.ap:.6f}" if s.num_gt > 0 else "nan"
                w.writerow([c, ap, s.num_gt, s.num_det])
            w.writerow(["mAP", f"{self.map:.6f}", "", ""])


def precision_envelope_area(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the monotone precision envelope of a PR curve."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[steps] - mrec[steps - 1]) * mpre[steps]))


def average_precision(
    dets: Sequence[Detection],
    truths: Mapping[object, Sequence],
    iou_thresh: float = EVAL_IOU,
) -> ClassStats:
    """AP for one class.

    ``truths`` maps frame id to that frame's boxes of this class.  Detections
    are visited by descending score (stable for ties) and each is matched to
    the unmatched same-frame truth with the highest IoU, provided that IoU is
    at least ``iou_thresh``.
    """
    num_gt = sum(len(v) for v in truths.values())
    boxes = {f: np.asarray(v, dtype=np.float64).reshape(-1, 4) for f, v in truths.items()}
    used = {f: np.zeros(len(b), dtype=bool) for f, b in boxes.items()}
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        d = dets[i]
        gt = boxes.get(d.frame_id)
        if gt is None or len(gt) == 0:
            continue
        ov = np.where(used[d.frame_id], -1.0, iou(gt, np.asarray(d.box, dtype=np.float64)))
        j = int(np.argmax(ov))
        if ov[j] >= iou_thresh:
            used[d.frame_id][j] = True
            tp[rank] = 1.0
    n_tp = int(tp.sum())
    if num_gt == 0:
        return ClassStats(float("nan"), n_tp, len(order) - n_tp, 0, len(dets))
    ctp = np.cumsum(tp)
    recall = ctp / num_gt
    precision = ctp / np.arange(1, len(order) + 1)
    ap = precision_envelope_area(recall, precision) if len(order) else 0.0
    return ClassStats(ap, n_tp, len(order) - n_tp, num_gt, len(dets))


def evaluate(
    dets: Sequence[Detection],
    truths_by_frame: Mapping[object, Sequence],
    num_classes: int,
    iou_thresh: float = EVAL_IOU,
) -> EvalResult:
    """Per-class AP and mAP.

    ``truths_by_frame`` maps frame id to a sequence of ground truths, each
    either a ``GroundTruth`` or a ``(box, class_ids)`` pair.
    """
    per_class_truth: list[dict] = [dict() for _ in range(num_classes)]
    for frame, items in truths_by_frame.items():
        for t in items:
            if hasattr(t, "classes"):
                box, classes = t.box, np.flatnonzero(t.classes)
            else:
                box, classes = t[0], np.atleast_1d(t[1])
            for c in classes:
                per_class_truth[int(c)].setdefault(frame, []).append(tuple(box))
    per_class_dets: list[list[Detection]] = [[] for _ in range(num_classes)]
    for d in dets:
        per_class_dets[d.class_id].append(d)
    stats = {
        c: average_precision(per_class_dets[c], per_class_truth[c], iou_thresh)
        for c in range(num_classes)
    }
    return EvalResult(stats, num_classes)
