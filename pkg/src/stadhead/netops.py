"""Toy two-stream forward pass with fixed extractors and trainable 1x1 heads.

Shape contract for an input clip ``[3, D, H, W]``:

* spatial branch on the key (last) frame -> three maps ``[C_2D, H/s, W/s]``
  for strides 8, 16, 32;
* temporal branch on the whole clip -> ``[C_3D, H/32, W/32]``;
* fusion (nearest upscale, concat, CFAM channel attention, fixed 1x1 mix)
  -> ``[C_inter, H/s, W/s]`` per level;
* decoupled head: two fixed 3x3 smoothing stages per branch, then trainable
  1x1 maps to ``num_classes`` classification and ``4*16`` regression logits.

Everything except :class:`HeadWeights` is a constant map.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pyramid import NUM_BINS, STRIDES, AnchorGrid, PredictionSet, check_dims

REG_CHANNELS = 4 * NUM_BINS
HEAD_MAGIC = b"SHD1"
HEAD_VERSION = 1
PRIOR_PROB = 0.01

# (dy, dx) offsets sampled by the spatial filter bank; channel i reads the
# coverage map at (y + dy, x + dx)
SPATIAL_OFFSETS = (
    (0, 0), (0, -1), (0, 1), (-1, 0), (1, 0),
    (0, -2), (0, 2), (-2, 0), (2, 0),
    (-1, -1), (-1, 1), (1, -1), (1, 1),
)

_CLS_KERNEL = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 16.0
_REG_KERNEL = np.array([[0, 1, 0], [1, 8, 1], [0, 1, 0]], dtype=np.float64) / 12.0
for _k in (_CLS_KERNEL, _REG_KERNEL):
    _k.setflags(write=False)


@dataclass(frozen=True)
class NetConfig:
    num_classes: int = 6
    c2d: int = 16
    c3d: int = 8
    c_inter: int = 16
    cfam_gamma: float = 0.05
    motion_eps: float = 1e-3

    def __post_init__(self):
        if self.c2d != self.c_inter:
            raise ValueError("the spatial branch feeds fusion directly, so c2d must equal c_inter")
        if self.c2d < len(SPATIAL_OFFSETS) + 3:
            raise ValueError(f"c2d must be at least {len(SPATIAL_OFFSETS) + 3}")
        if not 0 <= self.c3d <= 8:
            raise ValueError("c3d must lie in [0, 8]")


# ---------------------------------------------------------------------------
# fixed extractors


def chroma(frames: np.ndarray) -> np.ndarray:
    """Per-pixel ``max(rgb) - min(rgb)``; the channel axis is the first one."""
    return frames.max(axis=0) - frames.min(axis=0)


def block_mean(x: np.ndarray, s: int) -> np.ndarray:
    h, w = x.shape[-2:]
    return x.reshape(*x.shape[:-2], h // s, s, w // s, s).mean(axis=(-3, -1))


def shift(x: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """``out[y, x] = x[y + dy, x + dx]`` with zero fill outside the map."""
    out = np.zeros_like(x)
    h, w = x.shape[-2:]
    ys, yd = slice(max(dy, 0), h + min(dy, 0)), slice(max(-dy, 0), h + min(-dy, 0))
    xs, xd = slice(max(dx, 0), w + min(dx, 0)), slice(max(-dx, 0), w + min(-dx, 0))
    out[..., yd, xd] = x[..., ys, xs]
    return out


def spatial_features(frame: np.ndarray, cfg: NetConfig = NetConfig()) -> list[np.ndarray]:
    """Pyramid of coverage features for the key frame ``[3, H, W]``.

    The chroma map is average-pooled to each level and expanded with shifted
    copies, two edge differences and a pooled intensity channel.
    """
    frame = np.asarray(frame, dtype=np.float64)
    check_dims(*frame.shape[-2:])
    fg = chroma(frame)
    gray = frame.mean(axis=0)
    out = []
    for s in STRIDES:
        cov = block_mean(fg, s)
        chans = [shift(cov, dy, dx) for dy, dx in SPATIAL_OFFSETS]
        chans.append(shift(cov, 0, 1) - shift(cov, 0, -1))
        chans.append(shift(cov, 1, 0) - shift(cov, -1, 0))
        chans.append(block_mean(gray, s))
        while len(chans) < cfg.c2d:
            chans.append(np.zeros_like(cov))
        out.append(np.stack(chans[: cfg.c2d]))
    return out


def _box_sum3(x: np.ndarray) -> np.ndarray:
    return sum(shift(x, dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1))


def temporal_features(clip: np.ndarray, cfg: NetConfig = NetConfig()) -> np.ndarray:
    """Motion statistics of a clip ``[3, D, H, W]`` pooled to ``[C_3D, H/32, W/32]``.

    Frame differences of the chroma map are combined with its spatial
    gradient into normal-flow moments.  Sums are taken over 32x32 cells and
    then over each cell's 3x3 neighbourhood, so an object straddling a cell
    border is seen whole.  Channels: x-flow, y-flow, area change (each
    normalised to [-1, 1]), their positive parts, motion energy and flow
    magnitude.
    """
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim != 4 or clip.shape[0] != 3:
        raise ValueError(f"clip must be [3, D, H, W], got {clip.shape}")
    if clip.shape[1] < 2:
        raise ValueError("clip needs at least two frames")
    h, w = clip.shape[-2:]
    check_dims(h, w)
    m = chroma(clip)  # (D, H, W)
    d = np.diff(m, axis=0)
    mid = 0.5 * (m[1:] + m[:-1])
    gx = shift(mid, 0, 1) - shift(mid, 0, -1)
    gy = shift(mid, 1, 0) - shift(mid, -1, 0)

    def pooled(x):
        return _box_sum3(block_mean(x.sum(axis=0), 32))

    fx, fy = pooled(-d * gx), pooled(-d * gy)
    norm = pooled(np.abs(d) * (np.abs(gx) + np.abs(gy)))
    area, energy = pooled(d), pooled(np.abs(d))
    eps = cfg.motion_eps
    fx, fy = fx / (norm + eps), fy / (norm + eps)
    area = area / (energy + eps)
    chans = [
        fx, fy, area,
        np.maximum(fx, 0.0), np.maximum(fy, 0.0), np.maximum(area, 0.0),
        np.tanh(20.0 * energy / 9.0),
        np.hypot(fx, fy),
    ]
    return np.stack(chans[: cfg.c3d]) if cfg.c3d else np.zeros((0,) + fx.shape)


def upscale_nearest(x: np.ndarray, h: int, w: int) -> np.ndarray:
    fy, fx = h // x.shape[-2], w // x.shape[-1]
    if fy * x.shape[-2] != h or fx * x.shape[-1] != w:
        raise ValueError(f"cannot upscale {x.shape[-2:]} to {(h, w)}")
    return np.repeat(np.repeat(x, fy, axis=-2), fx, axis=-1)


def mixing_matrix(cfg: NetConfig) -> np.ndarray:
    """Fixed ``[C_inter, C_inter + C_3D]`` map applied after CFAM.

    Keeps the leading spatial channels (centre coverage and its nearest
    shifts) and the leading temporal channels.
    """
    n_in = cfg.c_inter + cfg.c3d
    n_t = min(cfg.c3d, cfg.c_inter // 2 - 1)
    n_s = cfg.c_inter - n_t
    mix = np.zeros((cfg.c_inter, n_in))
    mix[np.arange(n_s), np.arange(n_s)] = 1.0
    mix[n_s + np.arange(n_t), cfg.c_inter + np.arange(n_t)] = 1.0
    mix.setflags(write=False)
    return mix


def cfam(x: np.ndarray, gamma: float) -> np.ndarray:
    """Channel attention: ``x + gamma * softmax(G) @ x`` with ``G`` the mean Gram matrix."""
    c = x.shape[0]
    f = x.reshape(c, -1)
    gram = f @ f.T / f.shape[1]
    gram = gram - gram.max(axis=1, keepdims=True)
    att = np.exp(gram)
    att /= att.sum(axis=1, keepdims=True)
    return (f + gamma * (att @ f)).reshape(x.shape)


def fuse_cfam(f2d: np.ndarray, f3d: np.ndarray, cfg: NetConfig = NetConfig()) -> np.ndarray:
    ci, h, w = f2d.shape
    if ci != cfg.c_inter:
        raise ValueError(f"expected {cfg.c_inter} spatial channels, got {ci}")
    up = upscale_nearest(f3d, h, w)
    concat = np.concatenate([f2d, up], axis=0)
    out = cfam(concat, cfg.cfam_gamma)
    return np.einsum("oc,chw->ohw", mixing_matrix(cfg), out)


def smooth3(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return sum(kernel[dy + 1, dx + 1] * shift(x, dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1))


def branch_features(fused: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """The fixed parts of the two head branches: two smoothing stages each."""
    return smooth3(smooth3(fused, _CLS_KERNEL), _CLS_KERNEL), smooth3(smooth3(fused, _REG_KERNEL), _REG_KERNEL)


# ---------------------------------------------------------------------------
# trainable head


class HeadWeights:
    """Per-level 1x1 classification and regression maps in one flat vector.

    Storage order, level by level (lv1, lv2, lv3): ``cls_w [C_inter, K]``,
    ``cls_b [K]``, ``reg_w [C_inter, 64]``, ``reg_b [64]``, all row-major.
    """

    def __init__(self, c_inter: int, num_classes: int, params: np.ndarray | None = None):
        self.c_inter = c_inter
        self.num_classes = num_classes
        self.shapes = []
        for lv in range(len(STRIDES)):
            self.shapes += [
                (f"lv{lv + 1}.cls_w", (c_inter, num_classes)),
                (f"lv{lv + 1}.cls_b", (num_classes,)),
                (f"lv{lv + 1}.reg_w", (c_inter, REG_CHANNELS)),
                (f"lv{lv + 1}.reg_b", (REG_CHANNELS,)),
            ]
        self.size = sum(int(np.prod(s)) for _, s in self.shapes)
        if params is None:
            params = np.zeros(self.size)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got shape {params.shape}")
        if not np.all(np.isfinite(params)):
            raise ValueError("head weights must be finite")
        self.params = params

    @classmethod
    def initial(cls, c_inter: int, num_classes: int, prior_dist: float = 1.0, prior_width: float = 1.0) -> "HeadWeights":
        """Zero weights with prior biases.

        Classification biases start at the 1% prior probability.  Regression
        biases are a discretised Gaussian over the bins centred on
        ``prior_dist`` strides, so initial boxes have a sensible size.
        """
        hw = cls(c_inter, num_classes)
        bins = np.arange(NUM_BINS, dtype=np.float64)
        reg_prior = np.tile(-0.5 * ((bins - prior_dist) / prior_width) ** 2, 4)
        for lv in range(len(STRIDES)):
            hw.view(lv, "cls_b")[:] = -np.log((1 - PRIOR_PROB) / PRIOR_PROB)
            hw.view(lv, "reg_b")[:] = reg_prior
        return hw

    def like(self, params: np.ndarray) -> "HeadWeights":
        return HeadWeights(self.c_inter, self.num_classes, params)

    def copy(self) -> "HeadWeights":
        return self.like(self.params.copy())

    def view(self, lv: int, name: str) -> np.ndarray:
        key = f"lv{lv + 1}.{name}"
        start = 0
        for k, shape in self.shapes:
            n = int(np.prod(shape))
            if k == key:
                return self.params[start : start + n].reshape(shape)
            start += n
        raise KeyError(key)

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "wb") as fh:
            fh.write(HEAD_MAGIC + struct.pack("<I", HEAD_VERSION))
            fh.write(self.params.astype("<f8").tobytes())
        lines = [f"c_inter {self.c_inter}", f"num_classes {self.num_classes}"]
        lines += [f"{k} {'x'.join(map(str, s))}" for k, s in self.shapes]
        path.with_name(path.name + ".manifest").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "HeadWeights":
        path = Path(path)
        meta = {}
        for line in path.with_name(path.name + ".manifest").read_text().splitlines():
            k, v = line.split()
            meta[k] = v
        raw = path.read_bytes()
        if raw[:4] != HEAD_MAGIC:
            raise ValueError(f"{path} is not a head-weights file")
        (version,) = struct.unpack("<I", raw[4:8])
        if version != HEAD_VERSION:
            raise ValueError(f"unsupported head-weights version {version}")
        params = np.frombuffer(raw[8:], dtype="<f8").astype(np.float64)
        return cls(int(meta["c_inter"]), int(meta["num_classes"]), params)


def decoupled_head(fused: np.ndarray, weights: HeadWeights, lv: int) -> tuple[np.ndarray, np.ndarray]:
    """Level ``lv`` logits: ``([K, h, w], [64, h, w])``."""
    xc, xr = branch_features(fused)
    cls = np.einsum("ck,chw->khw", weights.view(lv, "cls_w"), xc) + weights.view(lv, "cls_b")[:, None, None]
    reg = np.einsum("ck,chw->khw", weights.view(lv, "reg_w"), xr) + weights.view(lv, "reg_b")[:, None, None]
    return cls, reg


@dataclass
class HeadInputs:
    """Fixed per-anchor inputs of the trainable maps, flattened lv1 | lv2 | lv3."""

    cls_x: np.ndarray  # (N, C_inter)
    reg_x: np.ndarray  # (N, C_inter)
    levels: np.ndarray  # (N,)

    def logits(self, weights: HeadWeights) -> PredictionSet:
        n = len(self.levels)
        cls = np.empty((n, weights.num_classes))
        reg = np.empty((n, REG_CHANNELS))
        for lv in range(len(STRIDES)):
            rows = self.levels == lv
            cls[rows] = self.cls_x[rows] @ weights.view(lv, "cls_w") + weights.view(lv, "cls_b")
            reg[rows] = self.reg_x[rows] @ weights.view(lv, "reg_w") + weights.view(lv, "reg_b")
        return PredictionSet(cls, reg.reshape(n, 4, NUM_BINS))

    def backward(self, weights: HeadWeights, grad_cls: np.ndarray, grad_reg: np.ndarray) -> np.ndarray:
        """Chain logit gradients back to a flat gradient over ``weights.params``."""
        out = weights.like(np.zeros(weights.size))
        grad_reg = grad_reg.reshape(len(grad_reg), REG_CHANNELS)
        for lv in range(len(STRIDES)):
            rows = self.levels == lv
            out.view(lv, "cls_w")[:] = self.cls_x[rows].T @ grad_cls[rows]
            out.view(lv, "cls_b")[:] = grad_cls[rows].sum(axis=0)
            out.view(lv, "reg_w")[:] = self.reg_x[rows].T @ grad_reg[rows]
            out.view(lv, "reg_b")[:] = grad_reg[rows].sum(axis=0)
        return out.params


def head_inputs(clip: np.ndarray, cfg: NetConfig = NetConfig()) -> HeadInputs:
    """Run every fixed stage for ``clip`` and collect the trainable maps' inputs."""
    clip = np.asarray(clip, dtype=np.float64)
    f2d = spatial_features(clip[:, -1], cfg)
    f3d = temporal_features(clip, cfg)
    cls_rows, reg_rows, levels = [], [], []
    for lv, f in enumerate(f2d):
        xc, xr = branch_features(fuse_cfam(f, f3d, cfg))
        cls_rows.append(xc.reshape(cfg.c_inter, -1).T)
        reg_rows.append(xr.reshape(cfg.c_inter, -1).T)
        levels.append(np.full(xc.shape[1] * xc.shape[2], lv))
    return HeadInputs(np.concatenate(cls_rows), np.concatenate(reg_rows), np.concatenate(levels))


def forward(clip: np.ndarray, weights: HeadWeights, cfg: NetConfig = NetConfig()) -> PredictionSet:
    return head_inputs(clip, cfg).logits(weights)


def check_alignment(preds: PredictionSet, grid: AnchorGrid) -> None:
    if len(preds) != len(grid):
        raise ValueError(f"{len(preds)} predictions for {len(grid)} anchors")
