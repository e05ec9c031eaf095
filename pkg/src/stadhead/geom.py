"""Axis-aligned box geometry: IoU, CIoU and the analytic CIoU-loss gradient.

Boxes are ``[x1, y1, x2, y2]`` in pixels.  Every function broadcasts over
leading dimensions, so ``(4,)`` against ``(N, 4)`` works as expected.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

_ASPECT_K = 4.0 / math.pi**2


class BoxXYXY(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    def validate(self) -> "BoxXYXY":
        if not all(math.isfinite(v) for v in self):
            raise ValueError(f"non-finite box {tuple(self)}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise ValueError(f"inverted box {tuple(self)}")
        return self

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_array(self) -> np.ndarray:
        return np.asarray(self, dtype=np.float64)


class CiouValue(NamedTuple):
    """CIoU of a box pair.

    ``similarity`` is CIoU clamped to [0, 1]; assignment metrics use it
    because they need a higher-is-better quantity that survives powers and
    logarithms.  ``alpha`` is the aspect-ratio trade-off coefficient, exposed
    so callers can freeze it when differentiating.
    """

    iou: np.ndarray
    ciou: np.ndarray
    loss: np.ndarray
    similarity: np.ndarray
    alpha: np.ndarray


def _split(b):
    b = np.asarray(b, dtype=np.float64)
    return b[..., 0], b[..., 1], b[..., 2], b[..., 3]


def box_area(b) -> np.ndarray:
    x1, y1, x2, y2 = _split(b)
    return (x2 - x1) * (y2 - y1)


def iou(a, b) -> np.ndarray:
    """Intersection over union; 0 for disjoint boxes or a zero union."""
    ax1, ay1, ax2, ay2 = _split(a)
    bx1, by1, bx2, by2 = _split(b)
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0.0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0.0, None)
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


def pairwise_iou(a, b) -> np.ndarray:
    """IoU matrix of shape ``(len(a), len(b))``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return iou(a[:, None, :], b[None, :, :])


def ciou(a, b, alpha=None) -> CiouValue:
    """Complete IoU: ``IoU - rho^2/c^2 - alpha*v``.

    ``rho`` is the centre distance, ``c`` the enclosing-box diagonal and ``v``
    the aspect-ratio consistency term.  Pass ``alpha`` to override the
    trade-off coefficient (used to evaluate the frozen-alpha surrogate).
    Coincident degenerate boxes have a zero enclosing diagonal; the penalty
    terms are then defined as 0.
    """
    ax1, ay1, ax2, ay2 = _split(a)
    bx1, by1, bx2, by2 = _split(b)
    ov = iou(a, b)

    rho2 = ((ax1 + ax2 - bx1 - bx2) ** 2 + (ay1 + ay2 - by1 - by2) ** 2) / 4.0
    cw = np.maximum(ax2, bx2) - np.minimum(ax1, bx1)
    ch = np.maximum(ay2, by2) - np.minimum(ay1, by1)
    c2 = cw**2 + ch**2
    with np.errstate(invalid="ignore", divide="ignore"):
        dist = np.where(c2 > 0, rho2 / np.where(c2 > 0, c2, 1.0), 0.0)

    # arctan2 keeps zero-height boxes finite
    v = _ASPECT_K * (np.arctan2(bx2 - bx1, by2 - by1) - np.arctan2(ax2 - ax1, ay2 - ay1)) ** 2
    if alpha is None:
        denom = (1.0 - ov) + v
        with np.errstate(invalid="ignore", divide="ignore"):
            alpha = np.where(denom > 0, v / np.where(denom > 0, denom, 1.0), 0.0)
    else:
        alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), np.shape(v))
    value = ov - dist - alpha * v
    return CiouValue(
        iou=ov,
        ciou=value,
        loss=1.0 - value,
        similarity=np.clip(value, 0.0, 1.0),
        alpha=np.asarray(alpha, dtype=np.float64),
    )


def ciou_grad(pred, truth, alpha=None) -> np.ndarray:
    """Gradient of ``1 - CIoU(pred, truth)`` with respect to ``pred``.

    The aspect coefficient alpha is treated as a constant.  Where a min/max
    is tied the gradient takes the branch belonging to ``truth`` (i.e. no
    contribution to ``pred``); zero-area unions and zero enclosing diagonals
    contribute nothing.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    px1, py1, px2, py2 = _split(pred)
    tx1, ty1, tx2, ty2 = _split(truth)
    shape = np.broadcast_shapes(px1.shape, tx1.shape)
    zero = np.zeros(shape)
    one = np.ones(shape)

    # intersection
    ix1, ix2 = np.maximum(px1, tx1), np.minimum(px2, tx2)
    iy1, iy2 = np.maximum(py1, ty1), np.minimum(py2, ty2)
    iw, ih = ix2 - ix1, iy2 - iy1
    overlap = (iw > 0) & (ih > 0)
    iw, ih = np.clip(iw, 0, None), np.clip(ih, 0, None)
    inter = iw * ih
    diw = np.stack([
        np.where(px1 > tx1, -one, zero), zero,
        np.where(px2 < tx2, one, zero), zero,
    ], axis=-1)
    dih = np.stack([
        zero, np.where(py1 > ty1, -one, zero),
        zero, np.where(py2 < ty2, one, zero),
    ], axis=-1)
    dinter = np.where(overlap[..., None], diw * ih[..., None] + dih * iw[..., None], 0.0)

    pw, ph = px2 - px1, py2 - py1
    tw, th = tx2 - tx1, ty2 - ty1
    darea = np.stack([-ph, -pw, ph, pw], axis=-1)
    union = pw * ph + tw * th - inter
    dunion = darea - dinter
    safe_u = np.where(union > 0, union, 1.0)
    diou = np.where(
        (union > 0)[..., None],
        (dinter * safe_u[..., None] - inter[..., None] * dunion) / (safe_u**2)[..., None],
        0.0,
    )

    # centre distance over enclosing diagonal
    dx = (px1 + px2 - tx1 - tx2) / 2.0
    dy = (py1 + py2 - ty1 - ty2) / 2.0
    rho2 = dx**2 + dy**2
    drho2 = np.stack([dx, dy, dx, dy], axis=-1)
    cw = np.maximum(px2, tx2) - np.minimum(px1, tx1)
    ch = np.maximum(py2, ty2) - np.minimum(py1, ty1)
    c2 = cw**2 + ch**2
    dcw = np.stack([np.where(px1 < tx1, -one, zero), zero, np.where(px2 > tx2, one, zero), zero], axis=-1)
    dch = np.stack([zero, np.where(py1 < ty1, -one, zero), zero, np.where(py2 > ty2, one, zero)], axis=-1)
    dc2 = 2.0 * cw[..., None] * dcw + 2.0 * ch[..., None] * dch
    safe_c = np.where(c2 > 0, c2, 1.0)
    ddist = np.where(
        (c2 > 0)[..., None],
        (drho2 * safe_c[..., None] - rho2[..., None] * dc2) / (safe_c**2)[..., None],
        0.0,
    )

    # aspect term
    if alpha is None:
        alpha = ciou(pred, truth).alpha
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), shape)
    delta = np.arctan2(tw, th) - np.arctan2(pw, ph)
    r2 = pw**2 + ph**2
    safe_r = np.where(r2 > 0, r2, 1.0)
    dv_dw = np.where(r2 > 0, -2.0 * _ASPECT_K * delta * ph / safe_r, 0.0)
    dv_dh = np.where(r2 > 0, 2.0 * _ASPECT_K * delta * pw / safe_r, 0.0)
    dv = np.stack([-dv_dw, -dv_dh, dv_dw, dv_dh], axis=-1)

    return -diou + ddist + alpha[..., None] * dv
