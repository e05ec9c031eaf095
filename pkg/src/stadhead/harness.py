"""Training and evaluation drivers for the toy pipeline.

Only :class:`~stadhead.netops.HeadWeights` are trained.  Because every stage
before the 1x1 head maps is fixed, per-clip head inputs are computed once and
reused across epochs.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .assign import SIMOTA, TAL, AssignConfig, assign
from .evalmap import EvalResult, evaluate
from .loss import LOSS_CSV_HEADER, LossHyper, detection_loss
from .netops import HeadInputs, HeadWeights, NetConfig, head_inputs
from .postprocess import NMS_IOU, SCORE_THRESH, postprocess
from .pyramid import build_grid
from .synthgen import SynthClip, class_counts

log = logging.getLogger(__name__)

THREADS_ENV = "STADHEAD_THREADS"


class ConfigError(ValueError):
    """Invalid training or CLI configuration."""


class TrainingError(RuntimeError):
    """Training aborted; ``dump`` describes the offending scene."""

    def __init__(self, msg: str, dump: dict):
        super().__init__(msg)
        self.dump = dump


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    warmup_steps: int = 500
    weight_decay: float = 0.0005
    lr_decay_factor: float = 2.0
    decay_epochs: tuple[int, ...] = (1, 2, 3, 4, 5)
    batch: int = 8
    grad_accumulation: int = 16
    epochs: int = 7
    mode: str = TAL
    top_k: int = 10
    dynamic_k: bool = False
    use_soft_labels: bool = True
    use_balance: bool = True
    use_ema: bool = True
    ema_decay: float = 0.999
    ema_ramp: float = 2000.0
    seed: int = 42
    score_thresh: float = SCORE_THRESH
    nms_iou: float = NMS_IOU

    def __post_init__(self):
        if self.lr <= 0 or self.batch < 1 or self.grad_accumulation < 1 or self.epochs < 1:
            raise ConfigError("lr, batch, grad_accumulation and epochs must be positive")
        if self.lr_decay_factor <= 1:
            raise ConfigError("lr_decay_factor must exceed 1")
        if self.warmup_steps < 0 or self.weight_decay < 0:
            raise ConfigError("warmup_steps and weight_decay must be non-negative")
        if self.mode not in (TAL, SIMOTA):
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.dynamic_k and self.mode != SIMOTA:
            raise ConfigError("dynamic_k requires SimOTA")
        if not 0 <= self.ema_decay < 1:
            raise ConfigError("ema_decay must lie in [0, 1)")
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))

    @classmethod
    def toy(cls, **kw) -> "TrainConfig":
        """Schedule sized for a few hundred synthetic clips and five epochs."""
        base = dict(lr=TOY_PRESET["lr"], warmup_steps=TOY_PRESET["warmup_steps"],
                    batch=TOY_PRESET["batch"], grad_accumulation=TOY_PRESET["grad_accumulation"],
                    epochs=TOY_PRESET["epochs"], ema_decay=TOY_PRESET["ema_decay"],
                    ema_ramp=TOY_PRESET["ema_ramp"])
        base.update(kw)
        return cls(**base)

    def assign_config(self) -> AssignConfig:
        return AssignConfig(mode=self.mode, top_k=self.top_k, dynamic_k=self.dynamic_k)


TOY_PRESET = dict(lr=2.0, warmup_steps=20, batch=2, grad_accumulation=1, epochs=5, ema_decay=0.99, ema_ramp=50.0)


@dataclass
class EmaState:
    shadow: np.ndarray
    decay: float
    updates: int = 0

    @classmethod
    def from_weights(cls, weights: HeadWeights, decay: float) -> "EmaState":
        return cls(weights.params.copy(), decay)


def ema_update(state: EmaState, current: HeadWeights | np.ndarray, decay: float | None = None) -> EmaState:
    """``shadow <- d * shadow + (1 - d) * current``; ``d`` defaults to ``state.decay``."""
    cur = current.params if isinstance(current, HeadWeights) else np.asarray(current, dtype=np.float64)
    if cur.shape != state.shadow.shape:
        raise ValueError(f"EMA shape mismatch: {state.shadow.shape} vs {cur.shape}")
    d = state.decay if decay is None else decay
    return EmaState(d * state.shadow + (1.0 - d) * cur, state.decay, state.updates + 1)


def ramped_decay(decay: float, updates: int, ramp: float) -> float:
    """Decay used for update number ``updates`` (1-based): small early, ``decay`` later."""
    if ramp <= 0:
        return decay
    return decay * (1.0 - math.exp(-updates / ramp))


def lr_schedule(step: int, epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup over ``warmup_steps`` then one division per passed decay epoch.

    ``epoch`` is 0-based; boundary ``b`` counts as passed once ``b`` epochs
    have completed.
    """
    if step < 0:
        raise ValueError("step must be non-negative")
    warm = 1.0 if cfg.warmup_steps == 0 else min(1.0, step / cfg.warmup_steps)
    passed = sum(1 for b in cfg.decay_epochs if epoch >= b)
    return cfg.lr * warm / cfg.lr_decay_factor**passed


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float, weight_decay: float) -> np.ndarray:
    """Plain SGD with the decay term ``-lr * wd * w`` kept separate from the gradient."""
    return params - lr * grad - lr * weight_decay * params


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer") from exc


@dataclass
class SceneResult:
    grad: np.ndarray
    report: object
    num_fg: int
    decomposition_error: float
    assign_seconds: float


@dataclass
class TrainResult:
    weights: HeadWeights
    ema: EmaState | None
    history: list[dict] = field(default_factory=list)
    loss_rows: list[list[str]] = field(default_factory=list)
    max_decomposition_error: float = 0.0
    assign_seconds: float = 0.0
    wall_seconds: float = 0.0

    @property
    def ema_weights(self) -> HeadWeights | None:
        return None if self.ema is None else self.weights.like(self.ema.shadow.copy())

    def final_map(self, use_ema: bool = False) -> float:
        return self.history[-1]["map_ema" if use_ema else "map_raw"]


class Pipeline:
    """Fixed forward stages plus assignment and loss for one input size."""

    def __init__(self, height: int, width: int, net: NetConfig):
        self.grid = build_grid(height, width)
        self.net = net

    def inputs(self, clips: Sequence[SynthClip]) -> list[HeadInputs]:
        work = [np.asarray(c.clip, dtype=np.float64) for c in clips]
        n = _threads()
        if n == 1:
            return [head_inputs(c, self.net) for c in work]
        with ThreadPoolExecutor(n) as pool:
            return list(pool.map(lambda c: head_inputs(c, self.net), work))

    def scene(self, x: HeadInputs, clip: SynthClip, weights: HeadWeights, acfg, hyper) -> SceneResult:
        preds = x.logits(weights)
        t0 = time.perf_counter()
        a = assign(self.grid, preds, clip.truths, acfg, soft_labels=hyper.use_soft_labels)
        dt = time.perf_counter() - t0
        rep = detection_loss(a, preds, self.grid, hyper)
        if not (math.isfinite(rep.total) and np.all(np.isfinite(rep.grad_cls)) and np.all(np.isfinite(rep.grad_reg))):
            raise TrainingError(
                f"non-finite loss on clip seed {clip.seed}",
                {
                    "seed": clip.seed,
                    "boxes": [list(t.box) for t in clip.truths],
                    "labels": clip.labels,
                    "total": rep.total,
                    "num_fg": a.num_fg,
                    "max_abs_logit": float(max(np.abs(preds.cls_logits).max(), np.abs(preds.reg_logits).max())),
                },
            )
        err = abs(rep.total * rep.normalizer - rep.reconstruct())
        grad = x.backward(weights, rep.grad_cls, rep.grad_reg)
        return SceneResult(grad, rep, a.num_fg, err, dt)

    def detect(self, x: HeadInputs, weights: HeadWeights, frame_id, cfg: TrainConfig):
        return postprocess(x.logits(weights), self.grid, frame_id, cfg.score_thresh, cfg.nms_iou)


def evaluate_weights(pipe: Pipeline, inputs, clips, weights: HeadWeights, cfg: TrainConfig, num_classes: int):
    dets = []
    for i, x in enumerate(inputs):
        dets.extend(pipe.detect(x, weights, i, cfg))
    truths = {i: c.truths for i, c in enumerate(clips)}
    return evaluate(dets, truths, num_classes), dets


def train(
    train_set: Sequence[SynthClip],
    eval_set: Sequence[SynthClip],
    cfg: TrainConfig,
    net: NetConfig | None = None,
    loss_csv: str | Path | None = None,
) -> TrainResult:
    """Fit head weights; evaluate raw and EMA weights after every epoch."""
    if not train_set:
        raise ConfigError("empty training set")
    t_start = time.perf_counter()
    num_classes = train_set[0].truths[0].classes.size if train_set[0].truths else 6
    net = net or NetConfig(num_classes=num_classes)
    h, w = train_set[0].clip.shape[-2:]
    pipe = Pipeline(h, w, net)
    _, ratios = class_counts(train_set, num_classes)
    hyper = LossHyper.for_mode(
        cfg.mode,
        use_balance=cfg.use_balance,
        use_soft_labels=cfg.use_soft_labels,
        class_ratio=tuple(ratios) if cfg.mode == SIMOTA else None,
    )
    acfg = cfg.assign_config()

    train_x = pipe.inputs(train_set)
    eval_x = pipe.inputs(eval_set)
    weights = HeadWeights.initial(net.c_inter, num_classes)
    ema = EmaState.from_weights(weights, cfg.ema_decay) if cfg.use_ema else None
    result = TrainResult(weights, ema)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    micro = 0
    n_threads = _threads()
    pool = ThreadPoolExecutor(n_threads) if n_threads > 1 else None
    acc = np.zeros(weights.size)
    acc_count = 0

    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(train_set))
            epoch_losses = []
            for start in range(0, len(order), cfg.batch):
                idx = order[start : start + cfg.batch]
                job = lambda i: pipe.scene(train_x[i], train_set[i], weights, acfg, hyper)  # noqa: E731
                scenes = list(pool.map(job, idx)) if pool else [job(i) for i in idx]
                grad = np.zeros(weights.size)
                for s in scenes:
                    grad += s.grad
                    result.max_decomposition_error = max(result.max_decomposition_error, s.decomposition_error)
                    result.assign_seconds += s.assign_seconds
                acc += grad / len(scenes)
                acc_count += 1
                reps = [s.report for s in scenes]
                row = [micro] + [float(np.mean([getattr(r, k) for r in reps])) for k in LOSS_CSV_HEADER[1:]]
                result.loss_rows.append([str(micro)] + [f"{v:.6f}" for v in row[1:]])
                epoch_losses.append(row[1])
                micro += 1
                if acc_count == cfg.grad_accumulation:
                    step += 1
                    lr = lr_schedule(step, epoch, cfg)
                    weights = weights.like(sgd_step(weights.params, acc / acc_count, lr, cfg.weight_decay))
                    acc[:] = 0.0
                    acc_count = 0
                    if ema is not None:
                        ema = ema_update(ema, weights, ramped_decay(cfg.ema_decay, ema.updates + 1, cfg.ema_ramp))
            raw_eval, _ = evaluate_weights(pipe, eval_x, eval_set, weights, cfg, num_classes)
            entry = {
                "epoch": epoch + 1,
                "steps": step,
                "lr": lr_schedule(max(step, 1), epoch, cfg),
                "loss": float(np.mean(epoch_losses)),
                "map_raw": raw_eval.map,
                "ap_raw": raw_eval.ap.tolist(),
            }
            if ema is not None:
                ema_eval, _ = evaluate_weights(pipe, eval_x, eval_set, weights.like(ema.shadow), cfg, num_classes)
                entry["map_ema"] = ema_eval.map
                entry["ap_ema"] = ema_eval.ap.tolist()
            result.history.append(entry)
            log.info("epoch %d: loss %.4f mAP raw %.4f ema %s", epoch + 1, entry["loss"], entry["map_raw"],
                     f"{entry['map_ema']:.4f}" if ema is not None else "-")
    finally:
        if pool:
            pool.shutdown()

    result.weights = weights
    result.ema = ema
    result.wall_seconds = time.perf_counter() - t_start
    if loss_csv is not None:
        write_loss_csv(loss_csv, result.loss_rows)
    return result


def write_loss_csv(path, rows) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_CSV_HEADER)
        w.writerows(rows)


def evaluate_clips(clips: Sequence[SynthClip], weights: HeadWeights, cfg: TrainConfig | None = None,
                   net: NetConfig | None = None) -> tuple[EvalResult, list]:
    cfg = cfg or TrainConfig()
    net = net or NetConfig(num_classes=weights.num_classes, c2d=weights.c_inter, c_inter=weights.c_inter)
    h, w = clips[0].clip.shape[-2:]
    pipe = Pipeline(h, w, net)
    return evaluate_weights(pipe, pipe.inputs(clips), clips, weights, cfg, weights.num_classes)


# ---------------------------------------------------------------------------
# key=value config files


def _coerce(name: str, value: str, current):
    if isinstance(current, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {value!r}")
    try:
        if isinstance(current, tuple):
            return tuple(int(v) for v in value.replace(",", " ").split())
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {value!r}") from exc
    return value.strip()


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def config_from_mapping(base: TrainConfig, values: dict[str, str]) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    updates = {}
    for k, v in values.items():
        if k not in known:
            raise ConfigError(f"unknown config key {k!r}")
        updates[k] = _coerce(k, v, getattr(base, k))
    return replace(base, **updates)


def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for k, v in asdict(cfg).items():
        if isinstance(v, tuple):
            v = ",".join(map(str, v))
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"


def history_json(result: TrainResult) -> str:
    return json.dumps(result.history, indent=2)
