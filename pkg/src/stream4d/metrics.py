"""Evaluation battery: point-cloud accuracy/completeness/normal-consistency,
scale-aligned depth error, and pairwise camera-pose accuracy curves.

Nearest-neighbor queries use a uniform voxel grid with an exact ring-expansion
search, so results match a brute-force scan to floating-point equality.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraPose, angle_between_deg, relative_pose


@dataclass
class CloudMetrics:
    acc_mean: float
    acc_median: float
    comp_mean: float
    comp_median: float
    nc_mean: float
    nc_median: float

    @property
    def overall(self) -> float:
        return (self.acc_mean + self.comp_mean) / 2.0

    def as_dict(self):
        return {"acc_mean": self.acc_mean, "acc_median": self.acc_median,
                "comp_mean": self.comp_mean, "comp_median": self.comp_median,
                "nc_mean": self.nc_mean, "nc_median": self.nc_median,
                "overall": self.overall}


@dataclass
class DepthMetrics:
    abs_rel: float
    delta_125: float
    scale: float

    def as_dict(self):
        return {"abs_rel": self.abs_rel, "delta_125": self.delta_125, "scale": self.scale}


@dataclass
class PoseMetrics:
    rra_curve: np.ndarray  # (30,) rotation accuracy at 1..30 degrees
    rta_curve: np.ndarray  # (30,) translation-direction accuracy
    auc30: float           # mean over thresholds of fraction passing both

    def as_dict(self):
        return {"auc30": self.auc30,
                "rra_mean": float(self.rra_curve.mean()),
                "rta_mean": float(self.rta_curve.mean())}


# ---------------------------------------------------------------------------
# Nearest neighbors
# ---------------------------------------------------------------------------

class _VoxelGrid:
    """Uniform hash grid over a reference cloud for exact NN queries."""

    def __init__(self, points: np.ndarray):
        self.points = points
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        span = float(np.max(hi - lo))
        # aim for a few points per cell; degenerate clouds get one big cell
        cell = span / max(1.0, np.cbrt(len(points)))
        self.cell = cell if cell > 0 else 1.0
        self.origin = lo
        keys = np.floor((points - lo) / self.cell).astype(np.int64)
        self.cells: dict[tuple, list[int]] = {}
        for i, k in enumerate(map(tuple, keys)):
            self.cells.setdefault(k, []).append(i)

    def _ring_cells(self, center, r):
        cx, cy, cz = center
        if r == 0:
            yield (cx, cy, cz)
            return
        for dx in range(-r, r + 1):
            for dy in range(-r, r + 1):
                for dz in range(-r, r + 1):
                    if max(abs(dx), abs(dy), abs(dz)) == r:
                        yield (cx + dx, cy + dy, cz + dz)

    def query(self, q: np.ndarray):
        """Index and squared distance of the nearest reference point."""
        center = tuple(np.floor((q - self.origin) / self.cell).astype(np.int64))
        best_d2 = np.inf
        best_i = -1
        r = 0
        while True:
            found_any = False
            for key in self._ring_cells(center, r):
                idx = self.cells.get(key)
                if not idx:
                    continue
                found_any = True
                pts = self.points[idx]
                d2 = np.einsum("ij,ij->i", pts - q, pts - q)
                j = int(np.argmin(d2))
                if d2[j] < best_d2:
                    best_d2 = float(d2[j])
                    best_i = idx[j]
            # points in ring r+1 lie at least r cells away from q's cell
            if best_i >= 0 and (r * self.cell) ** 2 >= best_d2:
                break
            if not found_any and best_i >= 0:
                break
            r += 1
        return best_i, best_d2


def nearest_neighbors(query: np.ndarray, ref: np.ndarray):
    """For each query point: (distance, index) of its nearest reference point."""
    query = np.asarray(query, dtype=np.float64).reshape(-1, 3)
    ref = np.asarray(ref, dtype=np.float64).reshape(-1, 3)
    if len(query) == 0 or len(ref) == 0:
        raise ValueError("nearest_neighbors: empty point set")
    grid = _VoxelGrid(ref)
    dists = np.empty(len(query))
    idx = np.empty(len(query), dtype=np.int64)
    for i, q in enumerate(query):
        j, d2 = grid.query(q)
        idx[i] = j
        dists[i] = np.sqrt(d2)
    return dists, idx


def estimate_normals(points: np.ndarray, k: int = 16) -> np.ndarray:
    """Per-point unit normals from a k-nearest-neighbor plane fit."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    k = min(k, n - 1)
    if k < 2:
        return np.tile(np.array([0.0, 0.0, 1.0]), (n, 1))
    normals = np.empty((n, 3))
    for i in range(n):
        d2 = np.einsum("ij,ij->i", pts - pts[i], pts - pts[i])
        nbrs = np.argpartition(d2, k)[: k + 1]  # includes the point itself
        local = pts[nbrs] - pts[nbrs].mean(axis=0)
        cov = local.T @ local
        _, vecs = np.linalg.eigh(cov)
        normals[i] = vecs[:, 0]
    return normals


def cloud_metrics(pred: np.ndarray, gt: np.ndarray,
                  pred_normals: np.ndarray | None = None,
                  gt_normals: np.ndarray | None = None) -> CloudMetrics:
    """Acc = pred-to-gt NN distances, Comp = gt-to-pred, NC = |cos| of normal
    angles at the nearest-neighbor pairings of both directions."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("cloud_metrics: empty point set")
    acc_d, acc_i = nearest_neighbors(pred, gt)
    comp_d, comp_i = nearest_neighbors(gt, pred)
    if pred_normals is None:
        pred_normals = estimate_normals(pred)
    if gt_normals is None:
        gt_normals = estimate_normals(gt)
    cos_acc = np.abs(np.einsum("ij,ij->i", pred_normals, gt_normals[acc_i]))
    cos_comp = np.abs(np.einsum("ij,ij->i", gt_normals, pred_normals[comp_i]))
    nc = np.concatenate([cos_acc, cos_comp])
    return CloudMetrics(acc_mean=float(acc_d.mean()), acc_median=float(np.median(acc_d)),
                        comp_mean=float(comp_d.mean()), comp_median=float(np.median(comp_d)),
                        nc_mean=float(nc.mean()), nc_median=float(np.median(nc)))


# ---------------------------------------------------------------------------
# Depth
# ---------------------------------------------------------------------------

def sequence_depth_scale(preds, gts, masks) -> float:
    """Median of gt/pred depth ratios over every valid pixel of a sequence."""
    ratios = []
    for p, g, m in zip(preds, gts, masks):
        m = np.asarray(m, dtype=bool)
        p = np.asarray(p, dtype=np.float64)[m]
        g = np.asarray(g, dtype=np.float64)[m]
        ok = np.abs(p) > 1e-12
        ratios.append(g[ok] / p[ok])
    ratios = np.concatenate(ratios) if ratios else np.array([])
    if len(ratios) == 0:
        raise ValueError("sequence_depth_scale: no valid pixels")
    return float(np.median(ratios))


def depth_metrics(pred, gt, mask, scale: float | None = None) -> DepthMetrics:
    """AbsRel and the delta<1.25 inlier fraction after scale alignment.

    scale=None aligns on this map alone; pass sequence_depth_scale(...) for a
    per-sequence alignment.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != gt.shape or pred.shape != mask.shape:
        raise ValueError(f"depth_metrics: shapes {pred.shape}/{gt.shape}/{mask.shape} differ")
    if not mask.any():
        raise ValueError("depth_metrics: no valid pixels")
    if scale is None:
        scale = sequence_depth_scale([pred], [gt], [mask])
    p = pred[mask] * scale
    g = gt[mask]
    abs_rel = float(np.mean(np.abs(p - g) / g))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(p / g, g / p)
    ratio = np.where(np.isfinite(ratio) & (p > 0), ratio, np.inf)
    delta = float(np.mean(ratio < 1.25))
    return DepthMetrics(abs_rel=abs_rel, delta_125=delta, scale=float(scale))


# ---------------------------------------------------------------------------
# Camera pose
# ---------------------------------------------------------------------------

def pose_auc30(pred_poses, gt_poses) -> PoseMetrics:
    """Pairwise relative rotation / translation-direction errors, accuracy at
    integer thresholds 1..30 degrees, and the area under the min-curve."""
    if len(pred_poses) != len(gt_poses):
        raise ValueError("pose_auc30: pose count mismatch")
    if len(pred_poses) < 2:
        raise ValueError("pose_auc30: need at least two frames")
    rot_errs, trans_errs = [], []
    n = len(pred_poses)
    for i in range(n):
        for j in range(i + 1, n):
            rp, tp = relative_pose(pred_poses[i], pred_poses[j])
            rg, tg = relative_pose(gt_poses[i], gt_poses[j])
            c = (np.trace(rp.T @ rg) - 1.0) / 2.0
            rot_errs.append(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
            trans_errs.append(angle_between_deg(tp, tg))
    rot_errs = np.asarray(rot_errs)
    trans_errs = np.asarray(trans_errs)
    taus = np.arange(1, 31)
    rra = (rot_errs[None, :] < taus[:, None]).mean(axis=1)
    rta = (trans_errs[None, :] < taus[:, None]).mean(axis=1)
    both = ((rot_errs[None, :] < taus[:, None]) &
            (trans_errs[None, :] < taus[:, None])).mean(axis=1)
    return PoseMetrics(rra_curve=rra, rta_curve=rta, auc30=float(both.mean()))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def metrics_report_text(sections: dict) -> str:
    """Key-value text report grouped by section."""
    lines = []
    for section, values in sections.items():
        lines.append(f"[{section}]")
        for key, val in values.items():
            lines.append(f"{key} = {val:.6f}" if isinstance(val, float) else f"{key} = {val}")
        lines.append("")
    return "\n".join(lines)


def metrics_report_csv(sections: dict) -> str:
    lines = ["section,metric,value"]
    for section, values in sections.items():
        for key, val in values.items():
            lines.append(f"{section},{key},{val}")
    return "\n".join(lines) + "\n"
