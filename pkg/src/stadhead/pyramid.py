"""Anchor-point pyramid and the 16-bin distance distribution used by the head.

Each level contributes one anchor per feature-map cell, centred at
``(i + 0.5) * stride``.  Side distances are measured in stride units and
represented as a distribution over integer bins ``0..15``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STRIDES = (8, 16, 32)
NUM_BINS = 16
MAX_DIST = NUM_BINS - 1 - 1e-3


class DimensionError(ValueError):
    """Input size incompatible with the stride-32 pyramid."""


@dataclass(frozen=True)
class AnchorGrid:
    height: int
    width: int
    points: np.ndarray  # (N, 2) pixel centres (cx, cy)
    strides: np.ndarray  # (N,)
    levels: np.ndarray  # (N,) 0, 1, 2 for lv1..lv3
    counts: tuple[int, int, int]

    def __len__(self) -> int:
        return len(self.strides)

    def level_slice(self, lv: int) -> slice:
        start = sum(self.counts[:lv])
        return slice(start, start + self.counts[lv])

    def level_shape(self, lv: int) -> tuple[int, int]:
        s = STRIDES[lv]
        return self.height // s, self.width // s


def check_dims(height: int, width: int) -> None:
    if height <= 0 or width <= 0 or height % 32 or width % 32:
        raise DimensionError(f"height and width must be positive multiples of 32, got {height}x{width}")


def build_grid(height: int, width: int) -> AnchorGrid:
    check_dims(height, width)
    pts, strides, levels, counts = [], [], [], []
    for lv, s in enumerate(STRIDES):
        h, w = height // s, width // s
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        pts.append(np.stack([(xs.ravel() + 0.5) * s, (ys.ravel() + 0.5) * s], axis=1))
        strides.append(np.full(h * w, float(s)))
        levels.append(np.full(h * w, lv, dtype=np.int64))
        counts.append(h * w)
    points = np.concatenate(pts).astype(np.float64)
    points.setflags(write=False)
    return AnchorGrid(
        height=height,
        width=width,
        points=points,
        strides=np.concatenate(strides),
        levels=np.concatenate(levels),
        counts=tuple(counts),
    )


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def expected_distance(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-side expected bin index and the softmax probabilities.

    ``logits`` has shape ``(..., 4, 16)``; returns ``(..., 4)`` and
    ``(..., 4, 16)``.
    """
    p = softmax(logits)
    return p @ np.arange(NUM_BINS, dtype=np.float64), p


def dist_to_box(dist: np.ndarray, points: np.ndarray, strides: np.ndarray) -> np.ndarray:
    """Convert ``(l, t, r, b)`` stride-unit distances to ``[x1, y1, x2, y2]``."""
    dist = np.asarray(dist, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    s = np.asarray(strides, dtype=np.float64)[..., None]
    d = dist * s
    return np.concatenate([points - d[..., :2], points + d[..., 2:]], axis=-1)


def decode_dfl(logits, points, strides) -> np.ndarray:
    """Decode ``(..., 4, 16)`` distribution logits into boxes around anchors."""
    dist, _ = expected_distance(logits)
    return dist_to_box(dist, points, strides)


def encode_ltrb_unchecked(truth, points, strides) -> np.ndarray:
    truth = np.asarray(truth, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    s = np.asarray(strides, dtype=np.float64)[..., None]
    d = np.concatenate([points - truth[..., :2], truth[..., 2:] - points], axis=-1) / s
    return np.clip(d, 0.0, MAX_DIST)


def encode_ltrb(truth, point, stride) -> np.ndarray:
    """Stride-unit ``(l, t, r, b)`` from an anchor to a box containing it.

    Distances are clamped to ``[0, 15 - 1e-3]`` so both DFL target bins exist.
    """
    t = np.asarray(truth, dtype=np.float64)
    cx, cy = float(point[0]), float(point[1])
    if not (t[0] < cx < t[2] and t[1] < cy < t[3]):
        raise ValueError(f"anchor ({cx}, {cy}) is not strictly inside box {t.tolist()}")
    return encode_ltrb_unchecked(t, np.array([cx, cy]), np.asarray(stride, dtype=np.float64))


def two_bin_logits(dist) -> np.ndarray:
    """Log-probabilities of the two-bin distribution whose mean is ``dist``.

    Bins outside the bracketing pair get ``-inf``; an integer distance puts
    all mass on one bin.
    """
    dist = np.asarray(dist, dtype=np.float64)
    lo = np.floor(dist).astype(np.int64)
    w_hi = dist - lo
    probs = np.zeros(dist.shape + (NUM_BINS,))
    np.put_along_axis(probs, lo[..., None], (1.0 - w_hi)[..., None], axis=-1)
    hi = np.minimum(lo + 1, NUM_BINS - 1)
    np.put_along_axis(
        probs, hi[..., None], np.take_along_axis(probs, hi[..., None], -1) + w_hi[..., None], axis=-1
    )
    with np.errstate(divide="ignore"):
        return np.log(probs)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class PredictionSet:
    """Raw head outputs aligned with an :class:`AnchorGrid`.

    ``cls_logits`` is ``(N, num_classes)``; ``reg_logits`` is ``(N, 4, 16)``
    with sides ordered l, t, r, b.
    """

    cls_logits: np.ndarray
    reg_logits: np.ndarray

    def __post_init__(self):
        self.cls_logits = np.asarray(self.cls_logits, dtype=np.float64)
        self.reg_logits = np.asarray(self.reg_logits, dtype=np.float64)
        if self.reg_logits.ndim == 2:
            self.reg_logits = self.reg_logits.reshape(len(self.reg_logits), 4, NUM_BINS)
        if self.reg_logits.shape[1:] != (4, NUM_BINS):
            raise ValueError(f"regression logits must be (N, 4, {NUM_BINS}), got {self.reg_logits.shape}")
        if len(self.cls_logits) != len(self.reg_logits):
            raise ValueError("classification and regression logits disagree on anchor count")

    def __len__(self) -> int:
        return len(self.cls_logits)

    @property
    def num_classes(self) -> int:
        return self.cls_logits.shape[1]

    def probs(self) -> np.ndarray:
        return sigmoid(self.cls_logits)

    def boxes(self, grid: AnchorGrid) -> np.ndarray:
        return decode_dfl(self.reg_logits, grid.points, grid.strides)
