"""Deterministic synthetic action clips: coloured rectangles moving over texture.

Each object performs one of six motions and its label is that motion.  The
ground-truth box is the rectangle's extent on the last (key) frame.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .assign import GroundTruth
from .loss import class_ratio_from_counts

log = logging.getLogger(__name__)

CLASS_NAMES = ("move-left", "move-right", "move-up", "move-down", "grow", "shrink")
NUM_CLASSES = len(CLASS_NAMES)
LABELS_FILE = "labels.jsonl"
MIN_SIDE = 12.0
MAX_SIDE = 26.0
MAX_TRIES = 100
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class DataError(ValueError):
    """Malformed or missing dataset files."""


@dataclass
class SynthClip:
    clip: np.ndarray  # float32 [3, D, H, W] in [0, 1]
    truths: list[GroundTruth]
    seed: int

    @property
    def labels(self) -> list[int]:
        return [int(np.flatnonzero(t.classes)[0]) for t in self.truths]

    @property
    def key_frame(self) -> np.ndarray:
        return self.clip[:, -1]


def _split_id(split: str) -> int:
    return zlib.crc32(split.encode())


def _texture(rng, h, w) -> np.ndarray:
    coarse = rng.uniform(0.25, 0.75, size=(h // 8 + 2, w // 8 + 2))
    ys = np.linspace(0, coarse.shape[0] - 1.001, h)
    xs = np.linspace(0, coarse.shape[1] - 1.001, w)
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    c = coarse
    smooth = (
        c[y0][:, x0] * (1 - fy) * (1 - fx) + c[y0 + 1][:, x0] * fy * (1 - fx)
        + c[y0][:, x0 + 1] * (1 - fy) * fx + c[y0 + 1][:, x0 + 1] * fy * fx
    )
    gray = np.clip(smooth + rng.normal(0, 0.04, size=(h, w)), 0, 1)
    tint = rng.normal(0, 0.01, size=(3, h, w))
    return np.clip(gray[None] + tint, 0, 1)


def _hue_color(rng) -> np.ndarray:
    hue = rng.uniform(0, 6)
    v = rng.uniform(0.8, 1.0)
    x = v * (1 - abs(hue % 2 - 1))
    sector = int(hue) % 6
    rgb = [(v, x, 0), (x, v, 0), (0, v, x), (0, x, v), (x, 0, v), (v, 0, x)][sector]
    return np.asarray(rgb)


def _trajectory(rng, label: int, frames: int, h: int, w: int) -> np.ndarray:
    """Boxes ``(frames, 4)`` for one object, last frame sized in [MIN_SIDE, MAX_SIDE]."""
    bw, bh = rng.uniform(MIN_SIDE, MAX_SIDE, size=2)
    t = np.arange(frames, dtype=np.float64) - (frames - 1)  # <= 0, key frame at 0
    cx, cy = rng.uniform(0, w), rng.uniform(0, h)
    speed = rng.uniform(0.6, 1.2)
    vx = vy = 0.0
    gw = gh = 0.0
    if label == 0:
        vx = -speed
    elif label == 1:
        vx = speed
    elif label == 2:
        vy = -speed
    elif label == 3:
        vy = speed
    elif label == 4:
        gw = gh = rng.uniform(0.4, 0.7)
    else:
        gw = gh = -rng.uniform(0.4, 0.7)
    xs, ys = cx + vx * t, cy + vy * t
    ws, hs = bw + gw * t, bh + gh * t
    return np.stack([xs - ws / 2, ys - hs / 2, xs + ws / 2, ys + hs / 2], axis=1)


def _coverage(lo: float, hi: float, n: int) -> np.ndarray:
    px = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(hi, px + 1) - np.maximum(lo, px), 0.0, 1.0)


def _overlaps(a: np.ndarray, b: np.ndarray, margin: float = 2.0) -> bool:
    return bool(np.any(
        (a[:, 0] < b[:, 2] + margin) & (b[:, 0] < a[:, 2] + margin)
        & (a[:, 1] < b[:, 3] + margin) & (b[:, 1] < a[:, 3] + margin)
    ))


def _place(rng, labels, frames, h, w):
    tracks = []
    for label in labels:
        for _ in range(MAX_TRIES):
            tr = _trajectory(rng, label, frames, h, w)
            inside = np.all(tr[:, :2] >= 0) and np.all(tr[:, 2] <= w) and np.all(tr[:, 3] <= h)
            if inside and (tr[:, 2:] - tr[:, :2]).min() > 1.0 and not any(_overlaps(tr, o) for o in tracks):
                tracks.append(tr)
                break
        else:
            return None
    return tracks


def _stratified_labels(u0: float, start: int, count: int, weights: np.ndarray) -> list[int]:
    cdf = np.cumsum(weights) / np.sum(weights)
    return [int(np.searchsorted(cdf, (u0 + (start + i) * _GOLDEN) % 1.0, side="right")) for i in range(count)]


def make_clip(
    seed: int,
    index: int,
    split: str = "train",
    objects: tuple[int, int] = (1, 1),
    weights: Sequence[float] | None = None,
    frames: int = 16,
    height: int = 64,
    width: int = 64,
) -> SynthClip:
    weights = np.ones(NUM_CLASSES) if weights is None else np.asarray(weights, dtype=np.float64)
    u0 = np.random.default_rng([seed, _split_id(split)]).random()
    clip_seed = int(np.random.SeedSequence([seed, _split_id(split), index]).generate_state(1)[0])
    for attempt in range(MAX_TRIES):
        rng = np.random.default_rng([clip_seed, attempt])
        n_obj = int(rng.integers(objects[0], objects[1] + 1))
        labels = _stratified_labels(u0, index * objects[1], n_obj, weights)
        tracks = _place(rng, labels, frames, height, width)
        if tracks is not None:
            break
        log.info("clip %d: placement failed, retrying with derived seed (attempt %d)", index, attempt + 1)
    else:
        raise RuntimeError(f"could not place objects for clip {index}")

    bg = _texture(rng, height, width)
    colors = [_hue_color(rng) for _ in tracks]
    clip = np.empty((3, frames, height, width))
    for f in range(frames):
        canvas = bg.copy()
        for tr, col in zip(tracks, colors):
            x1, y1, x2, y2 = tr[f]
            mask = np.outer(_coverage(y1, y2, height), _coverage(x1, x2, width))
            canvas = canvas * (1 - mask) + col[:, None, None] * mask
        clip[:, f] = canvas
    truths = [GroundTruth.single(tr[-1], lab, NUM_CLASSES) for tr, lab in zip(tracks, labels)]
    return SynthClip(clip.astype(np.float32), truths, clip_seed)


def generate(
    seed: int,
    num_clips: int,
    objects_per_clip: tuple[int, int] = (1, 1),
    imbalance: Sequence[float] | None = None,
    split: str = "train",
    frames: int = 16,
    height: int = 64,
    width: int = 64,
) -> list[SynthClip]:
    """Generate ``num_clips`` clips; each clip draws from its own seed stream.

    Labels follow a golden-ratio stratified sequence over the class
    ``imbalance`` weights, so class frequencies track the weights closely
    even for small datasets.
    """
    if num_clips < 1:
        raise ValueError("num_clips must be >= 1")
    if imbalance is not None and (len(imbalance) != NUM_CLASSES or min(imbalance) < 0 or sum(imbalance) <= 0):
        raise ValueError(f"imbalance needs {NUM_CLASSES} non-negative weights")
    lo, hi = objects_per_clip
    if not 1 <= lo <= hi:
        raise ValueError("objects_per_clip must satisfy 1 <= lo <= hi")
    return [
        make_clip(seed, i, split, (lo, hi), imbalance, frames, height, width)
        for i in range(num_clips)
    ]


def class_counts(dataset: Sequence[SynthClip], num_classes: int = NUM_CLASSES) -> tuple[np.ndarray, np.ndarray]:
    """Per-class truth counts and the matching class_ratio vector."""
    if not dataset:
        raise ValueError("empty dataset")
    counts = np.zeros(num_classes, dtype=np.int64)
    for clip in dataset:
        for t in clip.truths:
            counts += (t.classes > 0).astype(np.int64)
    return counts, class_ratio_from_counts(counts)


def save_dataset(dataset: Sequence[SynthClip], root, split: str) -> Path:
    out = Path(root) / split
    out.mkdir(parents=True, exist_ok=True)
    with open(out / LABELS_FILE, "w") as fh:
        for i, item in enumerate(dataset):
            name = f"clip_{i:05d}.f32"
            item.clip.astype("<f4").tofile(out / name)
            rec = {
                "file": name,
                "shape": list(item.clip.shape),
                "height": item.clip.shape[2],
                "width": item.clip.shape[3],
                "boxes": [list(map(float, t.box)) for t in item.truths],
                "classes": [np.flatnonzero(t.classes).tolist() for t in item.truths],
                "num_classes": int(item.truths[0].classes.size) if item.truths else NUM_CLASSES,
                "seed": item.seed,
            }
            fh.write(json.dumps(rec) + "\n")
    return out


def load_dataset(root, split: str | None = None) -> list[SynthClip]:
    d = Path(root) if split is None else Path(root) / split
    labels = d / LABELS_FILE
    if not labels.is_file():
        raise DataError(f"no {LABELS_FILE} in {d}")
    out = []
    for n, line in enumerate(labels.read_text().splitlines()):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            shape = tuple(rec["shape"])
            arr = np.fromfile(d / rec["file"], dtype="<f4")
            if arr.size != int(np.prod(shape)):
                raise DataError(f"{rec['file']}: expected {np.prod(shape)} floats, found {arr.size}")
            k = rec.get("num_classes", NUM_CLASSES)
            truths = []
            for box, cls in zip(rec["boxes"], rec["classes"]):
                y = np.zeros(k)
                y[cls] = 1.0
                truths.append(GroundTruth(box, y))
        except (KeyError, ValueError, OSError) as exc:
            raise DataError(f"{labels}:{n + 1}: {exc}") from exc
        out.append(SynthClip(arr.reshape(shape).astype(np.float32), truths, int(rec["seed"])))
    if not out:
        raise DataError(f"{labels} lists no clips")
    return out
