"""Distillation trainer: a global-attention teacher produces pseudo ground
truth for the causal student. Plain supervised training is the blend=0 case
of the same step. AdamW with linear warmup and cosine decay.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import tensor as T
from .geometry import quat_slerp
from .model import Model
from .scenes import SceneFrameGT, reanchor_window
from .tensor import Tape

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class OptimizerError(RuntimeError):
    """Raised when a step would apply a non-finite gradient."""


@dataclass
class TrainConfig:
    epochs: int = 2
    steps_per_epoch: int = 200
    frames_per_sample: int = 10
    # paper-scale fine-tuning would use a far smaller peak (1e-6); training a
    # toy model from scratch needs a real learning rate.
    peak_lr: float = 1e-3
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    seed: int = 0
    distill: bool = False
    pseudo_gt_blend: float = 1.0
    grad_clip: float = 1e4

    def __post_init__(self):
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie strictly between 0 and 1")
        if not 0.0 <= self.pseudo_gt_blend <= 1.0:
            raise ValueError("pseudo_gt_blend must lie in [0, 1]")
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.frames_per_sample < 1:
            raise ValueError("epochs, steps_per_epoch, frames_per_sample must be positive")

    @property
    def total_steps(self):
        return self.epochs * self.steps_per_epoch


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear 0 -> peak over the warmup steps, then cosine decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside 0..{total_steps}")
    warmup = max(1, round(config.warmup_frac * total_steps))
    if step <= warmup:
        return config.peak_lr * step / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return config.peak_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def optimizer_step(params: dict, state: AdamState, lr: float, weight_decay: float,
                   betas=ADAM_BETAS, eps=ADAM_EPS, grad_clip: float | None = None):
    """Decoupled-weight-decay adaptive moment update, in place."""
    b1, b2 = betas
    state.t += 1
    t = state.t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if not np.isfinite(g).all():
            raise OptimizerError(f"non-finite gradient in parameter {name!r}")
        if grad_clip is not None:
            g = np.clip(g, -grad_clip, grad_clip)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data, dtype=np.float64)
            state.v[name] = np.zeros_like(p.data, dtype=np.float64)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1 ** t)
        v_hat = state.v[name] / (1 - b2 ** t)
        if weight_decay:
            p.data -= (lr * weight_decay * p.data).astype(p.data.dtype)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)


def zero_grads(params: dict):
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# Supervision targets
# ---------------------------------------------------------------------------

def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _gt_targets(gts: list[SceneFrameGT]):
    return {
        "pose9": np.stack([g.pose.as_vector() for g in gts]),
        "depth": np.stack([g.depth for g in gts]).astype(np.float64),
        "points": np.stack([g.point_map for g in gts]).astype(np.float64),
        "valid": np.stack([g.valid for g in gts]),
        "tracks": np.stack([g.tracks for g in gts]).astype(np.float64),
        "visibility": np.stack([g.visibility for g in gts]).astype(np.float64),
    }


def _blend_targets(gt: dict, teacher_preds, blend: float) -> dict:
    """blend * pseudo-GT + (1 - blend) * GT per supervision term.

    Poses blend by lerp on translation/fov and slerp on sign-aligned
    quaternions; visibility blends teacher probabilities with GT flags.
    """
    if blend == 0.0 or teacher_preds is None:
        return gt
    out = dict(gt)
    pose9 = []
    for g_vec, pred in zip(gt["pose9"], teacher_preds):
        p_vec = pred.pose.as_vector()
        q = quat_slerp(g_vec[3:7], p_vec[3:7], blend)
        pose9.append(np.concatenate([
            (1 - blend) * g_vec[0:3] + blend * p_vec[0:3], q,
            (1 - blend) * g_vec[7:9] + blend * p_vec[7:9]]))
    out["pose9"] = np.stack(pose9)
    out["depth"] = (1 - blend) * gt["depth"] + blend * np.stack(
        [p.depth for p in teacher_preds])
    out["points"] = (1 - blend) * gt["points"] + blend * np.stack(
        [p.point_map for p in teacher_preds])
    if teacher_preds[0].tracks.size:
        out["tracks"] = (1 - blend) * gt["tracks"] + blend * np.stack(
            [p.tracks.T for p in teacher_preds])
        out["visibility"] = (1 - blend) * gt["visibility"] + blend * np.stack(
            [_sigmoid(p.visibility) for p in teacher_preds])
    return out


def compute_losses(model: Model, images, gts: list[SceneFrameGT], targets: dict,
                   weights: L.LossWeights):
    """Forward under the model's own attention mode + the four loss parts."""
    cfg = model.config
    queries = gts[0].tracks
    outs = model.forward_sequence(images, queries=queries)
    pose_pred = T.concat([o["pose9"] for o in outs], axis=0)
    parts = {"camera": L.camera_loss(pose_pred, targets["pose9"], weights.huber_delta)}
    depth_total, pmap_total = None, None
    for t, out in enumerate(outs):
        d = L.depth_loss(out["depth"], out["depth_conf"], targets["depth"][t],
                         targets["valid"][t], weights.alpha, cfg.height, cfg.width)
        p = L.pointmap_loss(out["points"], out["point_conf"], targets["points"][t],
                            targets["valid"][t], weights.alpha, cfg.height, cfg.width)
        depth_total = d if depth_total is None else T.add(depth_total, d)
        pmap_total = p if pmap_total is None else T.add(pmap_total, p)
    parts["depth"] = depth_total
    parts["pmap"] = pmap_total
    parts["track"] = L.track_loss([o["tracks"] for o in outs],
                                  [o["visibility"] for o in outs],
                                  targets["tracks"], targets["visibility"])
    return parts


def distill_step(student: Model, teacher: Model | None, images,
                 gts: list[SceneFrameGT], weights: L.LossWeights,
                 blend: float) -> dict:
    """One training step: forward, loss, backward. Gradients land on the
    student only; the teacher runs without a tape.

    Returns the scalar loss parts (floats) plus 'total'.
    """
    if teacher is not None and teacher.config != student.config:
        raise ValueError("teacher/student config mismatch")
    teacher_preds = None
    if teacher is not None and blend > 0.0:
        teacher_preds = teacher.predict_sequence(images, queries=gts[0].tracks,
                                                 mode="global")
    targets = _blend_targets(_gt_targets(gts), teacher_preds, blend)
    with Tape() as tape:
        parts = compute_losses(student, images, gts, targets, weights)
        total = L.total_loss(parts, weights)
        tape.backward(total)
    result = {name: p.item() for name, p in parts.items()}
    result["total"] = total.item()
    return result


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def _sample_window(rng, sequences, length):
    seq = sequences[rng.integers(len(sequences))]
    t = len(seq)
    win = min(length, t)
    start = int(rng.integers(0, t - win + 1))
    if start == 0:
        return seq[:win]
    window = reanchor_window(seq[start:start + win])
    if window[0].tracks.shape[0] == 0:  # no legal queries: fall back to a prefix
        return seq[:win]
    return window


def train(config: TrainConfig, sequences: list[list[SceneFrameGT]], model: Model,
          weights: L.LossWeights | None = None, teacher: Model | None = None,
          out_dir: str | None = None, log_path: str | None = None):
    """Optimize `model` in place; returns the per-step metric rows.

    Deterministic for a fixed seed and thread count. Writes a checkpoint per
    epoch plus a final one when out_dir is given, and a CSV log when log_path
    is given.
    """
    from .model import save_checkpoint

    if not sequences:
        raise ValueError("train: empty dataset")
    weights = weights or L.LossWeights()
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    rows = []
    blend = config.pseudo_gt_blend if config.distill else 0.0
    step = 0
    for epoch in range(config.epochs):
        for _ in range(config.steps_per_epoch):
            window = _sample_window(rng, sequences, config.frames_per_sample)
            images = [f.image for f in window]
            zero_grads(model.params)
            parts = distill_step(model, teacher if config.distill else None,
                                 images, window, weights, blend)
            lr = lr_at(step, config.total_steps, config)
            optimizer_step(model.params, state, lr, config.weight_decay,
                           grad_clip=config.grad_clip)
            rows.append({"step": step, "lr": lr, "L_camera": parts["camera"],
                         "L_depth": parts["depth"], "L_pmap": parts["pmap"],
                         "L_track": parts["track"], "L_total": parts["total"]})
            step += 1
        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, f"epoch_{epoch + 1:03d}.ckpt"), model)
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "final.ckpt"), model)
    if log_path is not None:
        write_metrics_log(log_path, rows)
    return rows


def write_metrics_log(path, rows):
    fieldnames = ["step", "lr", "L_camera", "L_depth", "L_pmap", "L_track", "L_total"]
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fieldnames)
            writer.writeheader()
            writer.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write metrics log {path}: {exc}") from exc


def pointmap_rmse(model: Model, sequences: list[list[SceneFrameGT]],
                  mode: str | None = None) -> float:
    """Root-mean-square point-map error over the valid pixels of held-out
    sequences; the standing quality score for ablations."""
    sq_sum = 0.0
    count = 0
    for seq in sequences:
        preds = model.predict_sequence([f.image for f in seq], mode=mode)
        for pred, gt in zip(preds, seq):
            m = gt.valid
            diff = pred.point_map[:, m] - gt.point_map[:, m]
            sq_sum += float((diff ** 2).sum())
            count += int(m.sum()) * 3
    return float(np.sqrt(sq_sum / max(count, 1)))
