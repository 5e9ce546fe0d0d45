"""Operator surface: generate data, train, stream, benchmark, evaluate.

Exit codes: 0 success, 1 validation error (bad flags, paths, config),
2 runtime error. Report-producing commands write a CSV plus a rendered
figure next to it.
"""

from __future__ import annotations

import argparse
import glob
import os
import struct
import sys
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .geometry import CameraPose
from .losses import LossWeights
from .metrics import (cloud_metrics, depth_metrics, metrics_report_csv,
                      metrics_report_text, pose_auc30, sequence_depth_scale)
from .model import (Model, ModelConfig, PredictionSet, StreamingSession,
                    load_checkpoint, save_checkpoint)
from .scenes import (dataset_read, dataset_write, export_ply, random_scene_spec,
                     render_sequence)
from .training import TrainConfig, pointmap_rmse, train, write_metrics_log


class CliValidationError(ValueError):
    """User input that fails validation (exit code 1)."""


@dataclass
class RunConfig:
    """Model + training + loss settings merged from a key=value file and
    --set overrides; unknown keys are rejected before any work starts."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)


_INT = int
_FLOAT = float


def _parse_bool(s):
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


_KEY_SCHEMA = {}
for f in fields(ModelConfig):
    _KEY_SCHEMA[f.name] = ("model", f.name, _INT)
for f in fields(TrainConfig):
    kind = _parse_bool if f.type == "bool" else (_INT if f.type == "int" else _FLOAT)
    _KEY_SCHEMA[f.name] = ("train", f.name, kind)
for f in fields(LossWeights):
    _KEY_SCHEMA[f.name] = ("loss", f.name, _FLOAT)


def parse_config_file(path) -> dict:
    if not os.path.isfile(path):
        raise CliValidationError(f"config file not found: {path}")
    pairs = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliValidationError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            pairs[key] = value
    return pairs


def build_run_config(pairs: dict) -> RunConfig:
    groups = {"model": {}, "train": {}, "loss": {}}
    for key, value in pairs.items():
        if key not in _KEY_SCHEMA:
            raise CliValidationError(f"unknown config key: {key!r}")
        group, name, conv = _KEY_SCHEMA[key]
        try:
            groups[group][name] = conv(value)
        except ValueError as exc:
            raise CliValidationError(f"config key {key!r}: {exc}") from exc
    try:
        return RunConfig(model=ModelConfig(**groups["model"]),
                         train=TrainConfig(**groups["train"]),
                         loss=LossWeights(**groups["loss"]))
    except ValueError as exc:
        raise CliValidationError(str(exc)) from exc


def _config_from_args(args) -> RunConfig:
    pairs = {}
    if getattr(args, "config", None):
        pairs.update(parse_config_file(args.config))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise CliValidationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        pairs[key.strip()] = value.strip()
    return build_run_config(pairs)


# ---------------------------------------------------------------------------
# Predictions container
# ---------------------------------------------------------------------------

_PRED_MAGIC = b"S4DP"
_PRED_VERSION = 1


def write_predictions(path, preds: list[PredictionSet]):
    if not preds:
        raise ValueError("write_predictions: empty prediction list")
    h, w = preds[0].depth.shape
    m = preds[0].tracks.shape[1]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIIII", _PRED_MAGIC, _PRED_VERSION, len(preds), h, w, m))
        for p in preds:
            fh.write(np.ascontiguousarray(p.pose.as_vector(), dtype="<f4").tobytes())
            for arr in (p.point_map, p.point_conf, p.depth, p.depth_conf,
                        p.tracks, p.visibility):
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_predictions(path) -> list[PredictionSet]:
    with open(path, "rb") as fh:
        head = fh.read(24)
        if len(head) < 24:
            raise ValueError(f"{path}: truncated predictions header")
        magic, version, t, h, w, m = struct.unpack("<4sIIIII", head)
        if magic != _PRED_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != _PRED_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        preds = []
        for _ in range(t):
            def arr(n):
                buf = fh.read(4 * n)
                if len(buf) != 4 * n:
                    raise ValueError(f"{path}: truncated predictions payload")
                return np.frombuffer(buf, dtype="<f4")
            pose = CameraPose.from_vector(arr(9).astype(np.float64))
            preds.append(PredictionSet(
                pose=pose,
                point_map=np.array(arr(3 * h * w).reshape(3, h, w)),
                point_conf=np.array(arr(h * w).reshape(h, w)),
                depth=np.array(arr(h * w).reshape(h, w)),
                depth_conf=np.array(arr(h * w).reshape(h, w)),
                tracks=np.array(arr(2 * m).reshape(2, m)),
                visibility=np.array(arr(m)),
            ))
    return preds


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _require_file(path, what):
    if not os.path.isfile(path):
        raise CliValidationError(f"{what} not found: {path}")


def load_sequences(data_dir):
    if not os.path.isdir(data_dir):
        raise CliValidationError(f"dataset directory not found: {data_dir}")
    paths = sorted(glob.glob(os.path.join(data_dir, "*.s4dd")))
    if not paths:
        raise CliValidationError(f"no .s4dd sequence files in {data_dir}")
    return [dataset_read(p) for p in paths]


def cmd_gen(args):
    if args.count < 1 or args.frames < 1 or args.tracks < 1:
        raise CliValidationError("--count, --frames and --tracks must be positive")
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.count):
        spec = random_scene_spec(args.seed + i, height=args.height, width=args.width,
                                 frame_count=args.frames, track_count=args.tracks)
        frames = render_sequence(spec)
        path = os.path.join(args.out, f"scene_{i:03d}.s4dd")
        dataset_write(path, frames)
        if args.ply:
            fr = frames[0]
            pts = fr.point_map.reshape(3, -1).T[fr.valid.reshape(-1)]
            cols = fr.image.reshape(3, -1).T[fr.valid.reshape(-1)]
            export_ply(os.path.splitext(path)[0] + ".ply", pts, colors=cols)
        print(f"wrote {path} ({args.frames} frames)")
    return 0


def cmd_train(args):
    cfg = _config_from_args(args)
    sequences = load_sequences(args.data)
    os.makedirs(args.out, exist_ok=True)
    if args.init:
        _require_file(args.init, "init checkpoint")
        model = load_checkpoint(args.init, attention_mode=args.attention)
        if args.attention == "global":
            model.attention_mode = "global"
    else:
        model = Model(cfg.model, seed=cfg.train.seed, attention_mode=args.attention)
    teacher = None
    train_cfg = cfg.train
    if args.distill:
        if not args.teacher:
            raise CliValidationError("--distill requires --teacher CKPT")
        _require_file(args.teacher, "teacher checkpoint")
        teacher = load_checkpoint(args.teacher, attention_mode="global")
        train_cfg.distill = True
    if model.attention_mode == "global" and args.distill:
        raise CliValidationError("a global-attention model cannot be the distilled student")

    log_path = os.path.join(args.out, "train_log.csv")
    rows = train(train_cfg, sequences, model, weights=cfg.loss, teacher=teacher,
                 out_dir=args.out, log_path=log_path)
    if not args.no_figures:
        from .figures import save_loss_figure
        save_loss_figure(rows, os.path.join(args.out, "loss_curves.png"))
    rmse = pointmap_rmse(model, sequences, mode=model.attention_mode)
    print(f"final checkpoint: {os.path.join(args.out, 'final.ckpt')}")
    print(f"train pointmap rmse: {rmse:.4f}")
    return 0


def cmd_stream(args):
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.dataset, "dataset")
    model = load_checkpoint(args.checkpoint, attention_mode="causal")
    frames = dataset_read(args.dataset)
    if frames[0].depth.shape != (model.config.height, model.config.width):
        raise CliValidationError(
            f"checkpoint expects {model.config.height}x{model.config.width} frames, "
            f"dataset has {frames[0].depth.shape}")
    session = StreamingSession(model, queries=frames[0].tracks)
    preds, timings = [], []
    for i, frame in enumerate(frames, start=1):
        t0 = time.perf_counter()
        preds.append(session.step(frame.image))
        timings.append({"frame_index": i, "seconds": time.perf_counter() - t0})
    write_predictions(args.out, preds)
    print(f"wrote {args.out} ({len(preds)} frames)")
    if args.timings_csv:
        with open(args.timings_csv, "w") as fh:
            fh.write("frame_index,seconds\n")
            for row in timings:
                fh.write(f"{row['frame_index']},{row['seconds']:.6f}\n")
    if args.emit_ply:
        os.makedirs(args.emit_ply, exist_ok=True)
        for i, p in enumerate(preds, start=1):
            pts = p.point_map.reshape(3, -1).T
            conf = p.point_conf.reshape(-1)
            export_ply(os.path.join(args.emit_ply, f"frame_{i:03d}.ply"),
                       pts, confidence=conf)
    return 0


def _bench_rows(model, images, frame_counts, reps):
    rows = []
    for t_total in frame_counts:
        imgs = images[:t_total]
        for rep in range(reps):
            session = StreamingSession(model)
            for i, img in enumerate(imgs, start=1):
                t0 = time.perf_counter()
                session.step(img)
                rows.append({"mode": "streaming", "frames": t_total, "rep": rep,
                             "frame_index": i, "seconds": time.perf_counter() - t0})
            # full-reprocess: an offline model rerun from scratch when frame T arrives
            t0 = time.perf_counter()
            model.predict_sequence(imgs, mode="causal")
            rows.append({"mode": "full_reprocess", "frames": t_total, "rep": rep,
                         "frame_index": t_total, "seconds": time.perf_counter() - t0})
            # full-causal: one batch pass over the whole sequence
            t0 = time.perf_counter()
            model.predict_sequence(imgs, mode="causal")
            rows.append({"mode": "full_causal", "frames": t_total, "rep": rep,
                         "frame_index": t_total, "seconds": time.perf_counter() - t0})
    return rows


def cmd_bench(args):
    _require_file(args.checkpoint, "checkpoint")
    try:
        frame_counts = [int(x) for x in args.frames.split(",") if x]
    except ValueError as exc:
        raise CliValidationError(f"--frames expects comma-separated integers: {exc}")
    if not frame_counts or min(frame_counts) < 1:
        raise CliValidationError("--frames must list positive integers")
    model = load_checkpoint(args.checkpoint, attention_mode="causal")
    cfg = model.config
    rng = np.random.default_rng(args.seed)
    images = [rng.uniform(0, 1, size=(3, cfg.height, cfg.width)).astype(np.float32)
              for _ in range(max(frame_counts))]
    rows = _bench_rows(model, images, frame_counts, args.reps)
    with open(args.out, "w") as fh:
        fh.write("mode,frames,rep,frame_index,seconds\n")
        for r in rows:
            fh.write(f"{r['mode']},{r['frames']},{r['rep']},{r['frame_index']},"
                     f"{r['seconds']:.6f}\n")
    print(f"wrote {args.out}")
    if not args.no_figures:
        from .figures import save_latency_figure
        save_latency_figure(rows, os.path.splitext(args.out)[0] + ".png")
    return 0


def evaluate_predictions(preds: list[PredictionSet], gts, max_cloud_points=4096):
    """Metric sections for a predicted sequence against its ground truth."""
    if len(preds) != len(gts):
        raise CliValidationError(f"prediction/dataset frame mismatch: "
                                 f"{len(preds)} vs {len(gts)}")
    scale = sequence_depth_scale([p.depth for p in preds], [g.depth for g in gts],
                                 [g.valid for g in gts])
    dm = depth_metrics(np.stack([p.depth for p in preds]),
                       np.stack([g.depth for g in gts]),
                       np.stack([g.valid for g in gts]), scale=scale)
    pred_pts = np.concatenate([p.point_map.reshape(3, -1).T[g.valid.reshape(-1)]
                               for p, g in zip(preds, gts)])
    gt_pts = np.concatenate([g.point_map.reshape(3, -1).T[g.valid.reshape(-1)]
                             for g in gts])
    stride = max(1, len(pred_pts) // max_cloud_points)
    cm = cloud_metrics(pred_pts[::stride], gt_pts[::stride])
    pm = pose_auc30([p.pose for p in preds], [g.pose for g in gts])
    return {"cloud": cm.as_dict(), "depth": dm.as_dict(), "pose": pm.as_dict()}, pm


def cmd_eval(args):
    _require_file(args.predictions, "predictions file")
    _require_file(args.dataset, "dataset")
    preds = read_predictions(args.predictions)
    gts = dataset_read(args.dataset)
    sections, pm = evaluate_predictions(preds, gts)
    text = metrics_report_text(sections)
    print(text)
    if args.out_csv:
        with open(args.out_csv, "w") as fh:
            fh.write(metrics_report_csv(sections))
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(text)
    if not args.no_figures and args.out_csv:
        from .figures import save_pose_curves_figure
        save_pose_curves_figure(pm, os.path.splitext(args.out_csv)[0] + "_pose.png")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliValidationError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="stream4d",
                     description="Streaming 4D geometry: data, training, "
                                 "inference, benchmarks, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic labeled sequences")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--tracks", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ply", action="store_true", help="also export frame-1 GT clouds")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model (teacher, student, or distilled)")
    p.add_argument("--data", required=True, help="directory of .s4dd sequences")
    p.add_argument("--out", required=True, help="output directory for checkpoints/logs")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key")
    p.add_argument("--attention", choices=("causal", "global"), default="causal")
    p.add_argument("--init", help="initialize weights from a checkpoint")
    p.add_argument("--distill", action="store_true")
    p.add_argument("--teacher", help="teacher checkpoint for --distill")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("stream", help="frame-by-frame inference over a sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="predictions output file")
    p.add_argument("--timings-csv")
    p.add_argument("--emit-ply", help="directory for per-frame PLY clouds")
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("bench", help="latency of streaming vs full recomputation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", default="1,5,10,20,40",
                   help="comma-separated sequence lengths")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="metrics report for predictions vs ground truth")
    p.add_argument("--predictions", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-csv")
    p.add_argument("--report", help="write the text report to this path")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (KeyboardInterrupt, SystemExit):
        raise
    except Exception as exc:  # runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
