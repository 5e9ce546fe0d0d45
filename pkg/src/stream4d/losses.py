"""Training losses: camera pose, confidence-weighted depth and point-map
regression with an image-gradient term, point tracking, and their weighted sum.

All functions take predictions as Tensors (so gradients flow) and targets as
plain numpy arrays. Map losses sum over valid pixels; masked pixels contribute
exactly zero to both value and gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ContractError(ValueError):
    """A loss input violates its contract (e.g. confidence below 1)."""


@dataclass
class LossWeights:
    lambda_track: float = 0.05
    alpha: float = 0.2
    huber_delta: float = 1.0

    def __post_init__(self):
        # lambda_track may be zero (drops the tracking term entirely)
        if self.lambda_track < 0 or self.alpha <= 0 or self.huber_delta <= 0:
            raise ValueError("loss weights must be positive (lambda_track >= 0)")


def camera_loss(pred_pose9: Tensor, target_pose9: np.ndarray, huber_delta: float = 1.0) -> Tensor:
    """Summed elementwise Huber over per-frame 9-vectors.

    Predicted quaternions are sign-flipped toward the target before
    differencing so that q and -q (the same rotation) cost nothing.
    """
    target = np.asarray(target_pose9, dtype=np.float64).reshape(-1, 9)
    if pred_pose9.shape != target.shape:
        raise T.ShapeError(f"camera_loss: prediction {pred_pose9.shape} vs "
                           f"target {target.shape}")
    dots = np.sum(pred_pose9.data[:, 3:7] * target[:, 3:7], axis=1)
    signs = np.ones_like(target)
    signs[:, 3:7] = np.where(dots < 0, -1.0, 1.0)[:, None]
    aligned = T.mul(pred_pose9, T.constant(signs))
    diff = T.sub(aligned, T.constant(target))
    return T.sum_all(T.huber(diff, huber_delta))


def _valid_diff_info(valid: np.ndarray, height: int, width: int, axis: int):
    """Mask and left-pixel indices for forward differences along an image axis."""
    v = valid.reshape(height, width).astype(bool)
    if axis == 1:
        both = v[:, :-1] & v[:, 1:]
        ii, jj = np.nonzero(np.ones((height, width - 1), dtype=bool))
    else:
        both = v[:-1, :] & v[1:, :]
        ii, jj = np.nonzero(np.ones((height - 1, width), dtype=bool))
    left_index = ii * width + jj
    return both.reshape(-1, 1).astype(np.float64), left_index


def _weighted_l1(residual: Tensor, conf: Tensor, mask: np.ndarray) -> Tensor:
    if conf.shape[1] != residual.shape[1]:
        conf = T.concat([conf] * residual.shape[1], axis=1)
    m = np.broadcast_to(mask, residual.shape)
    return T.sum_all(T.mul(T.constant(m), T.absval(T.mul(conf, residual))))


def _map_loss(pred: Tensor, conf: Tensor, target: np.ndarray, valid: np.ndarray,
              alpha: float, height: int, width: int, name: str) -> Tensor:
    """Shared confidence-weighted L1 + gradient-matching + -alpha*log(conf)."""
    channels = pred.shape[1]
    if pred.shape != (height * width, channels):
        raise T.ShapeError(f"{name}: prediction shape {pred.shape} != "
                           f"({height * width}, {channels})")
    if conf.shape != (height * width, 1):
        raise T.ShapeError(f"{name}: confidence shape {conf.shape} != ({height * width}, 1)")
    if (conf.data < 1.0 - 1e-6).any():
        raise ContractError(f"{name}: confidence below 1")
    tgt = np.asarray(target, dtype=np.float64).reshape(height * width, channels)
    vm = np.asarray(valid, dtype=np.float64).reshape(height * width, 1)

    loss = _weighted_l1(T.sub(pred, T.constant(tgt)), conf, vm)
    for axis in (1, 0):
        mask, left = _valid_diff_info(vm, height, width, axis)
        d_pred = T.image_forward_diff(pred, height, width, axis)
        d_tgt = np.diff(tgt.reshape(height, width, channels), axis=axis).reshape(-1, channels)
        conf_at = T.gather_rows(conf, left)
        loss = T.add(loss, _weighted_l1(T.sub(d_pred, T.constant(d_tgt)), conf_at, mask))
    reg = T.sum_all(T.mul(T.constant(vm), T.log(conf)))
    return T.add(loss, T.scale(reg, -alpha))


def depth_loss(depth_pred: Tensor, depth_conf: Tensor, depth_gt: np.ndarray,
               valid: np.ndarray, alpha: float, height: int, width: int) -> Tensor:
    return _map_loss(depth_pred, depth_conf, np.reshape(depth_gt, (-1, 1)), valid,
                     alpha, height, width, "depth_loss")


def pointmap_loss(points_pred: Tensor, point_conf: Tensor, points_gt: np.ndarray,
                  valid: np.ndarray, alpha: float, height: int, width: int) -> Tensor:
    """Depth-style loss over the 3 point channels with one shared confidence."""
    gt = np.asarray(points_gt)
    if gt.shape == (3, height, width):
        gt = gt.reshape(3, -1).T
    return _map_loss(points_pred, point_conf, gt, valid, alpha, height, width,
                     "pointmap_loss")


def track_loss(pred_tracks, vis_logits, gt_tracks: np.ndarray,
               gt_visibility: np.ndarray) -> Tensor:
    """L1 over target-visible points plus mean BCE on visibility logits.

    pred_tracks / vis_logits: per-frame Tensors of shape (M, 2) and (M, 1);
    gt_tracks: (T, M, 2) pixel coordinates; gt_visibility: (T, M) in [0, 1].
    """
    gt_tracks = np.asarray(gt_tracks, dtype=np.float64)
    gt_vis = np.asarray(gt_visibility, dtype=np.float64)
    frames, m = gt_vis.shape
    if len(pred_tracks) != frames or len(vis_logits) != frames:
        raise T.ShapeError(f"track_loss: {len(pred_tracks)} predicted frames vs "
                           f"{frames} target frames")
    loss = None
    for t in range(frames):
        if pred_tracks[t].shape != (m, 2):
            raise T.ShapeError(f"track_loss: frame {t} tracks {pred_tracks[t].shape} "
                               f"!= ({m}, 2)")
        mask = np.repeat((gt_vis[t] >= 0.5).astype(np.float64).reshape(-1, 1), 2, axis=1)
        term = T.sum_all(T.mul(T.constant(mask),
                               T.absval(T.sub(pred_tracks[t], T.constant(gt_tracks[t])))))
        loss = term if loss is None else T.add(loss, term)
    logits = T.concat(list(vis_logits), axis=0)
    targets = T.constant(gt_vis.reshape(-1, 1))
    bce = T.sub(T.softplus(logits), T.mul(logits, targets))
    return T.add(loss, T.scale(T.sum_all(bce), 1.0 / (frames * m)))


def total_loss(parts: dict, weights: LossWeights) -> Tensor:
    """L_camera + L_depth + L_pmap + lambda * L_track, with a NaN guard."""
    for name in ("camera", "depth", "pmap", "track"):
        if name not in parts:
            raise KeyError(f"total_loss: missing part {name!r}")
        if not np.isfinite(parts[name].data).all():
            raise FloatingPointError(f"total_loss: non-finite value in part {name!r}")
    return T.add(T.add(T.add(parts["camera"], parts["depth"]), parts["pmap"]),
                 T.scale(parts["track"], weights.lambda_track))
