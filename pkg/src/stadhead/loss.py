"""Composite detection losses with analytic gradients.

Two pairings are supported, each normalised differently:

* TAL: ``(alpha*sum delta*(1-CIoU) + beta*sum delta*DFL + gamma*sum BCE) / omega``
  where ``delta`` is the mass of an anchor's soft target vector and ``omega``
  is the total mass over matched anchors.
* SimOTA: ``(alpha*sum (1-CIoU) + beta*sum DFL + gamma*sum w*BCE) / |P|`` with
  the focal/balance weight ``w = exp(t) * |y - p|**nu``.

Gradients are with respect to the head logits for a fixed assignment.  The
CIoU aspect coefficient and the focal/balance weights are constants under
differentiation; both are returned in the report so a caller can re-evaluate
the loss with them frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .assign import SIMOTA, TAL, Assignment
from .geom import ciou, ciou_grad
from .pyramid import NUM_BINS, AnchorGrid, PredictionSet, encode_ltrb_unchecked, sigmoid, softmax

RATIO_FLOOR = 0.01


def bce(logit, target):
    """Logit-domain binary cross entropy and its derivative ``sigmoid(z) - t``."""
    z = np.asarray(logit, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return loss, sigmoid(z) - t


def dfl_loss(logits, target):
    """Distribution loss against the two bins bracketing ``target``.

    ``logits`` is ``(..., 16)``, ``target`` is ``(...)`` in ``[0, 15)``.
    Returns the loss ``(...)`` and its gradient ``(..., 16)``.
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if np.any((y < 0) | (y >= NUM_BINS - 1)):
        raise ValueError(f"DFL target must lie in [0, {NUM_BINS - 1})")
    lo = np.floor(y).astype(np.int64)
    w_hi = y - lo
    weights = np.zeros(z.shape)
    np.put_along_axis(weights, lo[..., None], (1.0 - w_hi)[..., None], axis=-1)
    np.put_along_axis(weights, lo[..., None] + 1, w_hi[..., None], axis=-1)
    zmax = np.max(z, axis=-1, keepdims=True)
    log_p = z - zmax - np.log(np.sum(np.exp(z - zmax), axis=-1, keepdims=True))
    loss = -np.sum(weights * np.where(weights > 0, log_p, 0.0), axis=-1)
    return loss, np.exp(log_p) - weights


def class_ratio_from_counts(counts) -> np.ndarray:
    """``clamp(0.5*log(1+n_c)/log(1+n_max), 0.01, 0.5)``: frequent classes near 0.5, rare near 0."""
    n = np.asarray(counts, dtype=np.float64)
    n_max = n.max(initial=0.0)
    if n_max <= 0:
        return np.full(n.shape, RATIO_FLOOR)
    return np.clip(0.5 * np.log1p(n) / math.log1p(n_max), RATIO_FLOOR, 0.5)


@dataclass(frozen=True)
class LossHyper:
    mode: str = TAL
    alpha: float = 7.5
    beta: float = 1.5
    gamma: float = 0.5
    nu: float = 0.5
    use_balance: bool = True
    use_soft_labels: bool = True
    class_ratio: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.mode not in (TAL, SIMOTA):
            raise ValueError(f"unknown loss mode {self.mode!r}")
        if self.class_ratio is not None:
            r = np.asarray(self.class_ratio)
            if np.any(r <= 0) or np.any(r > 0.5):
                raise ValueError("class_ratio entries must lie in (0, 0.5]")
            object.__setattr__(self, "class_ratio", tuple(float(v) for v in r))

    @classmethod
    def tal(cls, **kw) -> "LossHyper":
        return cls(mode=TAL, alpha=7.5, beta=1.5, gamma=0.5, **kw)

    @classmethod
    def simota(cls, **kw) -> "LossHyper":
        return cls(mode=SIMOTA, alpha=5.5, beta=0.5, gamma=0.5, nu=0.5, **kw)

    @classmethod
    def for_mode(cls, mode: str, **kw) -> "LossHyper":
        return cls.tal(**kw) if mode == TAL else cls.simota(**kw)

    def ratios(self, num_classes: int) -> np.ndarray:
        if self.class_ratio is None:
            return np.full(num_classes, 0.5)
        if len(self.class_ratio) != num_classes:
            raise ValueError(f"class_ratio has {len(self.class_ratio)} entries, expected {num_classes}")
        return np.asarray(self.class_ratio)


@dataclass
class LossReport:
    total: float
    box_ciou: float
    box_dfl: float
    cls: float
    normalizer: float
    alpha: float
    beta: float
    grad_cls: np.ndarray
    grad_reg: np.ndarray
    ciou_alpha: np.ndarray
    cls_weight: np.ndarray | None = None

    def reconstruct(self) -> float:
        """Weighted sum of parts; equals ``total * normalizer``."""
        return math.fsum([self.alpha * self.box_ciou, self.beta * self.box_dfl, self.cls])

    def csv_row(self, step: int) -> list[str]:
        return [str(step)] + [f"{v:.6f}" for v in (self.total, self.box_ciou, self.box_dfl, self.cls, self.normalizer)]


LOSS_CSV_HEADER = ["step", "total", "box_ciou", "box_dfl", "cls", "normalizer"]


def balance_weight(targets, probs, class_ratio, nu: float, use_balance: bool = True) -> np.ndarray:
    """``exp(t) * |y - p|**nu`` with ``t = ratio`` where ``y != 0`` else ``1 - ratio``."""
    targets = np.asarray(targets)
    w = np.abs(targets - probs) ** nu
    if use_balance:
        r = np.broadcast_to(np.asarray(class_ratio, dtype=np.float64), targets.shape)
        w = w * np.exp(np.where(targets != 0, r, 1.0 - r))
    return w


def _fsum(x) -> float:
    return math.fsum(np.ravel(x).tolist())


def _box_terms(assignment, preds, grid, anchor_weight, frozen_alpha):
    """Per-anchor CIoU and DFL losses over the matched set plus their logit gradients.

    Returns (ciou_sum, dfl_sum, grad_reg_ciou, grad_reg_dfl, ciou_alpha), with
    each per-anchor term multiplied by ``anchor_weight`` (unnormalised).
    """
    n = len(preds)
    fg = np.flatnonzero(assignment.fg_mask)
    g_ciou = np.zeros((n, 4, NUM_BINS))
    g_dfl = np.zeros((n, 4, NUM_BINS))
    alpha_all = np.zeros(n)
    if fg.size == 0:
        return 0.0, 0.0, g_ciou, g_dfl, alpha_all

    z = preds.reg_logits[fg]
    p = softmax(z)
    bins = np.arange(NUM_BINS, dtype=np.float64)
    dist = p @ bins
    pts, s = grid.points[fg], grid.strides[fg]
    boxes = np.concatenate([pts - dist[:, :2] * s[:, None], pts + dist[:, 2:] * s[:, None]], axis=1)
    tgt = assignment.box_target[fg]
    w = anchor_weight[fg]

    alpha = ciou(boxes, tgt).alpha if frozen_alpha is None else np.asarray(frozen_alpha)[fg]
    alpha_all[fg] = alpha
    cv = ciou(boxes, tgt, alpha=alpha)
    ciou_sum = _fsum(w * cv.loss)
    dbox = ciou_grad(boxes, tgt, alpha=alpha) * w[:, None]
    ddist = dbox * np.stack([-s, -s, s, s], axis=1)
    # d dist / d z_j = p_j * (j - dist)
    g_ciou[fg] = ddist[:, :, None] * p * (bins[None, None, :] - dist[:, :, None])

    target_dist = encode_ltrb_unchecked(tgt, pts, s)
    side_loss, side_grad = dfl_loss(z, target_dist)
    dfl_sum = _fsum(w * side_loss.mean(axis=1))
    g_dfl[fg] = side_grad * (w[:, None, None] / 4.0)
    return ciou_sum, dfl_sum, g_ciou, g_dfl, alpha_all


def tal_loss(
    assignment: Assignment,
    preds: PredictionSet,
    grid: AnchorGrid,
    hyper: LossHyper,
    ciou_alpha=None,
) -> LossReport:
    t = assignment.cls_target
    delta = np.where(assignment.fg_mask, t.sum(axis=1), 0.0)
    omega = max(_fsum(delta), 1.0)

    ciou_sum, dfl_sum, g_ciou, g_dfl, alpha = _box_terms(assignment, preds, grid, delta, ciou_alpha)
    cls_loss, cls_grad = bce(preds.cls_logits, t)
    cls_sum = hyper.gamma * _fsum(cls_loss)

    parts = [hyper.alpha * ciou_sum, hyper.beta * dfl_sum, cls_sum]
    return LossReport(
        total=math.fsum(parts) / omega,
        box_ciou=ciou_sum,
        box_dfl=dfl_sum,
        cls=cls_sum,
        normalizer=omega,
        alpha=hyper.alpha,
        beta=hyper.beta,
        grad_cls=hyper.gamma * cls_grad / omega,
        grad_reg=(hyper.alpha * g_ciou + hyper.beta * g_dfl) / omega,
        ciou_alpha=alpha,
    )


def simota_loss(
    assignment: Assignment,
    preds: PredictionSet,
    grid: AnchorGrid,
    hyper: LossHyper,
    ciou_alpha=None,
    cls_weight=None,
) -> LossReport:
    t = assignment.cls_target
    norm = max(float(assignment.num_fg), 1.0)

    ones = np.ones(len(preds))
    ciou_sum, dfl_sum, g_ciou, g_dfl, alpha = _box_terms(assignment, preds, grid, ones, ciou_alpha)

    if cls_weight is None:
        cls_weight = balance_weight(t, preds.probs(), hyper.ratios(preds.num_classes), hyper.nu, hyper.use_balance)
    cls_loss, cls_grad = bce(preds.cls_logits, t)
    cls_sum = hyper.gamma * _fsum(cls_weight * cls_loss)

    parts = [hyper.alpha * ciou_sum, hyper.beta * dfl_sum, cls_sum]
    return LossReport(
        total=math.fsum(parts) / norm,
        box_ciou=ciou_sum,
        box_dfl=dfl_sum,
        cls=cls_sum,
        normalizer=norm,
        alpha=hyper.alpha,
        beta=hyper.beta,
        grad_cls=hyper.gamma * cls_weight * cls_grad / norm,
        grad_reg=(hyper.alpha * g_ciou + hyper.beta * g_dfl) / norm,
        ciou_alpha=alpha,
        cls_weight=np.asarray(cls_weight),
    )


def detection_loss(assignment, preds, grid, hyper: LossHyper, **frozen) -> LossReport:
    if assignment.mode != hyper.mode:
        raise ValueError(f"{hyper.mode} loss cannot consume a {assignment.mode} assignment")
    if hyper.mode == TAL:
        return tal_loss(assignment, preds, grid, hyper, **frozen)
    return simota_loss(assignment, preds, grid, hyper, **frozen)
