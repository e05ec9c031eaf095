"""Decode head outputs into detections and apply per-class NMS."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .geom import BoxXYXY, iou
from .pyramid import AnchorGrid, PredictionSet

SCORE_THRESH = 0.005
NMS_IOU = 0.5
DETECTIONS_HEADER = ["frame_id", "class_id", "score", "x1", "y1", "x2", "y2"]


@dataclass(frozen=True)
class Detection:
    box: BoxXYXY
    class_id: int
    score: float
    frame_id: int | str = 0
    anchor: int = -1


def decode_predictions(
    preds: PredictionSet,
    grid: AnchorGrid,
    score_thresh: float = SCORE_THRESH,
    frame_id: int | str = 0,
) -> list[Detection]:
    """One detection per (anchor, class) whose probability clears ``score_thresh``.

    Output is ordered by anchor index, then class.
    """
    if len(preds) != len(grid):
        raise ValueError(f"{len(preds)} predictions for {len(grid)} anchors")
    probs = preds.probs()
    anchors, classes = np.nonzero(probs >= score_thresh)
    if anchors.size == 0:
        return []
    boxes = preds.boxes(grid)
    return [
        Detection(BoxXYXY(*boxes[a].tolist()), int(c), float(probs[a, c]), frame_id, int(a))
        for a, c in zip(anchors, classes)
    ]


def nms(dets: Sequence[Detection], iou_thresh: float = NMS_IOU) -> list[Detection]:
    """Greedy suppression within each (frame, class) group.

    Candidates are visited by descending score, ties broken by ascending
    anchor index then input position; a detection is dropped when its IoU
    with an already kept one exceeds ``iou_thresh``.  Survivors keep that
    visiting order.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].anchor, i))
    kept: dict[tuple, list[np.ndarray]] = {}
    out = []
    for i in order:
        d = dets[i]
        key = (d.frame_id, d.class_id)
        box = np.asarray(d.box, dtype=np.float64)
        group = kept.setdefault(key, [])
        if group and np.max(iou(np.asarray(group), box)) > iou_thresh:
            continue
        group.append(box)
        out.append(d)
    return out


def postprocess(preds, grid, frame_id=0, score_thresh=SCORE_THRESH, iou_thresh=NMS_IOU) -> list[Detection]:
    return nms(decode_predictions(preds, grid, score_thresh, frame_id), iou_thresh)


def write_detections_csv(path, dets: Iterable[Detection]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DETECTIONS_HEADER)
        for d in dets:
            w.writerow([d.frame_id, d.class_id, f"{d.score:.6f}"] + [f"{v:.6f}" for v in d.box])


def read_detections_csv(path) -> list[Detection]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != DETECTIONS_HEADER:
            raise ValueError(f"{path}: expected header {','.join(DETECTIONS_HEADER)}")
        for row in reader:
            frame = row["frame_id"]
            out.append(Detection(
                BoxXYXY(*(float(row[k]) for k in ("x1", "y1", "x2", "y2"))),
                int(row["class_id"]),
                float(row["score"]),
                int(frame) if frame.lstrip("-").isdigit() else frame,
            ))
    return out
