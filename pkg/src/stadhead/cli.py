"""Command-line entry point: ``stadhead <subcommand> ...``.

Exit status: 0 success, 2 configuration or usage error, 3 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .assign import SIMOTA, TAL, assign, write_assignment_csv
from .evalmap import evaluate
from .harness import (
    ConfigError,
    Pipeline,
    TrainConfig,
    TrainingError,
    config_from_mapping,
    config_to_text,
    evaluate_clips,
    history_json,
    parse_config_text,
    train,
)
from .netops import HeadWeights, NetConfig
from .postprocess import read_detections_csv, write_detections_csv
from .synthgen import NUM_CLASSES, DataError, generate, load_dataset, save_dataset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3

log = logging.getLogger("stadhead")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def _load_weights(path) -> HeadWeights:
    try:
        return HeadWeights.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read weights {path}: {exc}") from exc


def _build_config(args) -> TrainConfig:
    cfg = TrainConfig.toy() if args.preset == "toy" else TrainConfig()
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        cfg = config_from_mapping(cfg, parse_config_text(text))
    if args.loss and args.assigner and args.loss != args.assigner:
        raise ConfigError(f"{args.loss} loss cannot be paired with {args.assigner} assignment")
    mode = args.loss or args.assigner
    updates = {}
    if mode:
        updates["mode"] = mode
    for flag, key in (("no_balance", "use_balance"), ("no_soft_labels", "use_soft_labels"), ("no_ema", "use_ema")):
        if getattr(args, flag):
            updates[key] = False
    if args.dynamic_k:
        updates["dynamic_k"] = True
    for key in ("epochs", "lr", "batch", "seed", "top_k"):
        val = getattr(args, key)
        if val is not None:
            updates[key] = val
    try:
        return replace(cfg, **updates)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_gen_data(args) -> int:
    imbalance = _floats(args.imbalance) if args.imbalance else None
    objects = tuple(int(v) for v in _floats(args.objects))
    if len(objects) != 2:
        raise ConfigError("--objects takes LO,HI")
    try:
        data = generate(args.seed, args.clips, objects, imbalance, args.split, args.frames, args.height, args.width)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = save_dataset(data, args.out, args.split)
    print(f"wrote {len(data)} clips to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _build_config(args)
    train_set = load_dataset(args.data, args.train_split)
    eval_set = load_dataset(args.data, args.eval_split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_to_text(cfg))
    try:
        result = train(train_set, eval_set, cfg, loss_csv=out / "loss.csv")
    except TrainingError as exc:
        print(f"training aborted: {exc}; scene {exc.dump}", file=sys.stderr)
        return EXIT_DATA
    result.weights.save(out / "weights.bin")
    if result.ema is not None:
        result.ema_weights.save(out / "weights_ema.bin")
    (out / "history.json").write_text(history_json(result))
    final = result.weights if result.ema is None else result.ema_weights
    ev, dets = evaluate_clips(eval_set, final, cfg)
    write_detections_csv(out / "detections.csv", dets)
    ev.write_csv(out / "eval.csv")
    for h in result.history:
        ema = f" ema {h['map_ema']:.6f}" if "map_ema" in h else ""
        print(f"epoch {h['epoch']}: loss {h['loss']:.6f} mAP@0.5 raw {h['map_raw']:.6f}{ema}")
    print(f"wall {result.wall_seconds:.2f}s; outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    clips = load_dataset(args.data, args.split)
    num_classes = clips[0].truths[0].classes.size if clips[0].truths else NUM_CLASSES
    if args.detections:
        try:
            dets = read_detections_csv(args.detections)
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"cannot read detections: {exc}") from exc
        if any(not 0 <= d.class_id < num_classes for d in dets):
            raise DataError("detection class_id out of range")
        result = evaluate(dets, {i: c.truths for i, c in enumerate(clips)}, num_classes)
    elif args.weights:
        result, _ = evaluate_clips(clips, _load_weights(args.weights))
    else:
        raise ConfigError("eval needs --detections or --weights")
    print(f"mAP@0.5 {result.map:.6f}")
    if args.out:
        result.write_csv(args.out)
    return EXIT_OK


def cmd_assign_debug(args) -> int:
    clips = load_dataset(args.data, args.split)
    if not 0 <= args.clip < len(clips):
        raise DataError(f"clip {args.clip} out of range (0..{len(clips) - 1})")
    clip = clips[args.clip]
    h, w = clip.clip.shape[-2:]
    num_classes = clip.truths[0].classes.size if clip.truths else NUM_CLASSES
    weights = _load_weights(args.weights) if args.weights else HeadWeights.initial(NetConfig().c_inter, num_classes)
    pipe = Pipeline(h, w, NetConfig(num_classes=num_classes, c2d=weights.c_inter, c_inter=weights.c_inter))
    preds = pipe.inputs([clip])[0].logits(weights)
    cfg = TrainConfig(mode=args.mode, top_k=args.top_k, dynamic_k=args.dynamic_k).assign_config()
    a = assign(pipe.grid, preds, clip.truths, cfg)
    write_assignment_csv(args.out, a, pipe.grid)
    print(f"{a.num_fg} matched anchors for {len(clip.truths)} truths; wrote {args.out}")
    return EXIT_OK


TRUTH_RGB = (0, 255, 0)
DET_RGB = (255, 0, 0)


def draw_box(img: np.ndarray, box, rgb) -> None:
    """1-pixel outline, clipped to the image (``img`` is uint8 ``[H, W, 3]``)."""
    h, w = img.shape[:2]
    x1, y1, x2, y2 = (int(round(v)) for v in box)
    x1, x2 = np.clip([x1, x2 - 1], 0, w - 1)
    y1, y2 = np.clip([y1, y2 - 1], 0, h - 1)
    img[y1, x1 : x2 + 1] = rgb
    img[y2, x1 : x2 + 1] = rgb
    img[y1 : y2 + 1, x1] = rgb
    img[y1 : y2 + 1, x2] = rgb


def write_ppm(path, img: np.ndarray) -> None:
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def cmd_render(args) -> int:
    clips = load_dataset(args.data, args.split)
    dets = []
    if args.detections:
        try:
            dets = read_detections_csv(args.detections)
        except (OSError, ValueError, KeyError) as exc:
            raise DataError(f"cannot read detections: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    count = len(clips) if args.limit is None else min(args.limit, len(clips))
    for i in range(count):
        frame = np.clip(clips[i].key_frame.transpose(1, 2, 0) * 255.0 + 0.5, 0, 255).astype(np.uint8)
        for t in clips[i].truths:
            draw_box(frame, t.box, TRUTH_RGB)
        for d in dets:
            if d.frame_id == i and d.score >= args.min_score:
                draw_box(frame, d.box, DET_RGB)
        write_ppm(out / f"clip_{i:05d}.ppm", frame)
    print(f"rendered {count} key frames to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stadhead", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic split")
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--clips", type=int, default=200)
    g.add_argument("--split", default="train")
    g.add_argument("--imbalance", help="six comma-separated class weights")
    g.add_argument("--objects", default="1,1", help="LO,HI objects per clip")
    g.add_argument("--frames", type=int, default=16)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train head weights")
    t.add_argument("--data", required=True)
    t.add_argument("--train-split", default="train")
    t.add_argument("--eval-split", default="eval")
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="key=value file; flags override it")
    t.add_argument("--preset", choices=("full", "toy"), default="toy")
    t.add_argument("--loss", choices=(TAL, SIMOTA))
    t.add_argument("--assigner", choices=(TAL, SIMOTA))
    t.add_argument("--no-balance", action="store_true")
    t.add_argument("--no-soft-labels", action="store_true")
    t.add_argument("--no-ema", action="store_true")
    t.add_argument("--dynamic-k", action="store_true")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--top-k", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="frame mAP@0.5 of detections or weights")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="eval")
    e.add_argument("--detections")
    e.add_argument("--weights")
    e.add_argument("--out", help="per-class CSV")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("assign-debug", help="dump one clip's assignment")
    a.add_argument("--data", required=True)
    a.add_argument("--split", default="train")
    a.add_argument("--clip", type=int, required=True)
    a.add_argument("--mode", choices=(TAL, SIMOTA), default=TAL)
    a.add_argument("--top-k", type=int, default=10)
    a.add_argument("--dynamic-k", action="store_true")
    a.add_argument("--weights")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_assign_debug)

    r = sub.add_parser("render", help="write key frames with boxes as PPM")
    r.add_argument("--data", required=True)
    r.add_argument("--split", default="eval")
    r.add_argument("--detections")
    r.add_argument("--min-score", type=float, default=0.3)
    r.add_argument("--limit", type=int)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
