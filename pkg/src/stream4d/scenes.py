"""Procedural synthetic 4D scenes with exact ground truth.

Ray-cast rendering of textured primitives (rectangles, spheres, boxes) under
flat shading. Every sequence is anchored to its first camera: frame 1 has the
identity pose, point maps are world coordinates in that frame, and depth is
per-frame camera z-depth, so unprojecting depth through the pose reproduces
the point map exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import (CameraPose, look_at_rotation, pixel_rays, project_points,
                       rot_to_quat, unproject_depth)

NEAR_PLANE = 0.05
VISIBILITY_DEPTH_TOL = 1e-4  # relative tolerance when re-casting track rays

unproject = unproject_depth  # pinhole lift is shared with the metrics side


class DegenerateTrajectoryError(ValueError):
    """Spline trajectory with no usable motion."""


class DatasetFormatError(ValueError):
    """Bad magic/version or truncated dataset container."""


# ---------------------------------------------------------------------------
# Primitives: each returns hit parameter s along z-normalized rays (inf = miss)
# ---------------------------------------------------------------------------

def _checker(coords: np.ndarray, scale: float) -> np.ndarray:
    """0/1 checkerboard from summed floor parities of the given coordinates."""
    return np.floor(coords * scale).sum(axis=-1).astype(np.int64) % 2


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    colors: np.ndarray  # (2, 3) palette
    checker_scale: float = 2.0

    def intersect(self, origin, dirs):
        oc = origin - np.asarray(self.center)
        b = dirs @ oc
        c = oc @ oc - self.radius ** 2
        a = np.einsum("ij,ij->i", dirs, dirs)
        disc = b * b - a * c
        s = np.full(dirs.shape[0], np.inf)
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        s0 = (-b - sq) / a
        s1 = (-b + sq) / a
        near = np.where(s0 > NEAR_PLANE, s0, s1)
        s[ok & (near > NEAR_PLANE)] = near[ok & (near > NEAR_PLANE)]
        return s

    def normal(self, pts):
        n = pts - np.asarray(self.center)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def color(self, pts):
        m = _checker(pts - np.asarray(self.center), self.checker_scale)
        return np.asarray(self.colors)[m]


@dataclass
class Rect:
    """Finite textured rectangle: center plus two half-extent edge vectors."""

    center: np.ndarray
    u_vec: np.ndarray
    v_vec: np.ndarray
    colors: np.ndarray
    checker_scale: float = 1.0

    def __post_init__(self):
        u = np.asarray(self.u_vec, dtype=np.float64)
        v = np.asarray(self.v_vec, dtype=np.float64)
        n = np.cross(u, v)
        self._n = n / np.linalg.norm(n)
        self._u_len2 = u @ u
        self._v_len2 = v @ v

    def intersect(self, origin, dirs):
        denom = dirs @ self._n
        num = (np.asarray(self.center) - origin) @ self._n
        s = np.where(np.abs(denom) > 1e-12, num / np.where(denom == 0, 1, denom), np.inf)
        pts = origin + dirs * s[:, None]
        rel = pts - np.asarray(self.center)
        a = np.abs(rel @ np.asarray(self.u_vec)) <= self._u_len2
        b = np.abs(rel @ np.asarray(self.v_vec)) <= self._v_len2
        return np.where((s > NEAR_PLANE) & a & b, s, np.inf)

    def normal(self, pts):
        return np.broadcast_to(self._n, pts.shape)

    def color(self, pts):
        rel = pts - np.asarray(self.center)
        uv = np.stack([rel @ np.asarray(self.u_vec) / np.sqrt(self._u_len2),
                       rel @ np.asarray(self.v_vec) / np.sqrt(self._v_len2)], axis=-1)
        m = _checker(uv, self.checker_scale)
        return np.asarray(self.colors)[m]


@dataclass
class Box:
    """Axis-aligned textured box."""

    center: np.ndarray
    half_sizes: np.ndarray
    colors: np.ndarray
    checker_scale: float = 2.5

    def intersect(self, origin, dirs):
        c = np.asarray(self.center)
        h = np.asarray(self.half_sizes)
        inv = 1.0 / np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
        t0 = (c - h - origin) * inv
        t1 = (c + h - origin) * inv
        tmin = np.minimum(t0, t1).max(axis=1)
        tmax = np.maximum(t0, t1).min(axis=1)
        hit = (tmax >= tmin) & (tmax > NEAR_PLANE)
        s = np.where(tmin > NEAR_PLANE, tmin, tmax)
        return np.where(hit & (s > NEAR_PLANE), s, np.inf)

    def normal(self, pts):
        rel = (pts - np.asarray(self.center)) / np.asarray(self.half_sizes)
        axis = np.argmax(np.abs(rel), axis=-1)
        n = np.zeros_like(rel)
        n[np.arange(len(pts)), axis] = np.sign(rel[np.arange(len(pts)), axis])
        return n

    def color(self, pts):
        m = _checker(pts - np.asarray(self.center), self.checker_scale)
        return np.asarray(self.colors)[m]


# ---------------------------------------------------------------------------
# Scene and trajectory specs
# ---------------------------------------------------------------------------

def _catmull_rom(controls: np.ndarray, taus: np.ndarray) -> np.ndarray:
    """Centripetal-free Catmull-Rom through every control point; taus in [0, 1]."""
    k = len(controls)
    if k == 2:
        return controls[0] + taus[:, None] * (controls[1] - controls[0])
    padded = np.vstack([controls[0], controls, controls[-1]])
    out = np.empty((len(taus), 3))
    seg_t = taus * (k - 1)
    for n, s in enumerate(seg_t):
        i = min(int(s), k - 2)
        t = s - i
        p0, p1, p2, p3 = padded[i], padded[i + 1], padded[i + 2], padded[i + 3]
        out[n] = 0.5 * ((2 * p1) + (-p0 + p2) * t + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t * t
                        + (-p0 + 3 * p1 - 3 * p2 + p3) * t ** 3)
    return out


@dataclass
class TrajectorySpec:
    """A static camera or a smooth spline of poses through control positions.

    orientation "look_at" turns the camera toward `target` along the path
    (anchored so frame 1 stays exactly identity); "fixed" keeps the identity
    rotation throughout (pure translation).
    """

    kind: str = "spline"  # "static" | "spline"
    controls: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    target: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 3.0]))
    orientation: str = "look_at"  # "look_at" | "fixed"

    def poses(self, frame_count: int, fov) -> list[CameraPose]:
        if self.kind == "static":
            return [CameraPose.identity(fov) for _ in range(frame_count)]
        if self.kind != "spline":
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.orientation not in ("look_at", "fixed"):
            raise ValueError(f"unknown orientation mode {self.orientation!r}")
        ctrl = np.atleast_2d(np.asarray(self.controls, dtype=np.float64))
        if ctrl.ndim != 2 or ctrl.shape[0] < 2 or ctrl.shape[1] != 3:
            raise DegenerateTrajectoryError(
                f"spline needs at least 2 control points of dim 3, got {ctrl.shape}")
        if np.linalg.norm(ctrl - ctrl[0], axis=1).max() < 1e-9:
            raise DegenerateTrajectoryError("zero-length spline trajectory")
        taus = np.linspace(0.0, 1.0, frame_count) if frame_count > 1 else np.zeros(1)
        positions = _catmull_rom(ctrl, taus)
        a0 = look_at_rotation(ctrl[0], self.target)
        poses = []
        for pos in positions:
            if self.orientation == "look_at":
                rot = look_at_rotation(pos, self.target) @ a0.T
            else:
                rot = np.eye(3)
            poses.append(CameraPose(pos - ctrl[0], rot_to_quat(rot), fov))
        # anchor exactly: frame 1 defines the world frame
        poses[0] = CameraPose.identity(fov)
        return poses


@dataclass
class SceneSpec:
    height: int = 32
    width: int = 32
    frame_count: int = 8
    track_count: int = 8
    fov: tuple = (0.96, 0.96)
    seed: int = 0
    primitives: list = field(default_factory=list)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    background: float = 0.08


@dataclass
class SceneFrameGT:
    """Exact labels for one rendered frame."""

    image: np.ndarray        # (3, H, W) in [0, 1]
    depth: np.ndarray        # (H, W) camera z-depth, 0 where invalid
    point_map: np.ndarray    # (3, H, W) frame-1 world coordinates
    pose: CameraPose
    tracks: np.ndarray       # (M, 2) continuous (u, v)
    visibility: np.ndarray   # (M,) bool
    valid: np.ndarray        # (H, W) bool


_LIGHT = np.array([0.35, -0.8, -0.25])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)

# distance attenuation: farther surfaces render darker, a standard synthetic
# depth cue that keeps monocular depth identifiable at very low resolution
_FALLOFF = 0.09


def _cast(primitives, origin, dirs):
    """First-hit parameter and primitive id per ray (-1 = miss)."""
    best = np.full(dirs.shape[0], np.inf)
    which = np.full(dirs.shape[0], -1)
    for i, prim in enumerate(primitives):
        s = prim.intersect(origin, dirs)
        closer = s < best
        best[closer] = s[closer]
        which[closer] = i
    return best, which


def _shade(primitives, which, pts, dirs, depth):
    color = np.zeros((len(which), 3))
    for i, prim in enumerate(primitives):
        sel = which == i
        if not sel.any():
            continue
        n = prim.normal(pts[sel])
        view = dirs[sel]
        n = np.where((np.einsum("ij,ij->i", n, view) > 0)[:, None], -n, n)
        lam = np.maximum(0.0, -(n @ _LIGHT))
        atten = 1.0 / (1.0 + _FALLOFF * depth[sel])
        color[sel] = prim.color(pts[sel]) * ((0.35 + 0.65 * lam) * atten)[:, None]
    return np.clip(color, 0.0, 1.0)


def _render_frame(spec: SceneSpec, pose: CameraPose):
    h, w = spec.height, spec.width
    rays_cam = pixel_rays(w, h, pose.fov)
    dirs = rays_cam @ pose.rotation.T
    s, which = _cast(spec.primitives, pose.translation, dirs)
    valid = np.isfinite(s)
    s_safe = np.where(valid, s, 0.0)
    pts = pose.translation + dirs * s_safe[:, None]
    image = np.full((h * w, 3), spec.background)
    image[valid] = _shade(spec.primitives, which, pts, dirs, s_safe)[valid]
    depth = np.where(valid, s_safe, 0.0)
    pmap = np.where(valid[:, None], pts, 0.0)
    return (image.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32),
            depth.reshape(h, w).astype(np.float32),
            pmap.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32),
            valid.reshape(h, w))


def _depth_at(spec: SceneSpec, pose: CameraPose, uv: np.ndarray):
    """Exact ray-cast z-depth at continuous pixel coordinates."""
    from .geometry import focal_from_fov
    fx, fy = focal_from_fov(pose.fov, spec.width, spec.height)
    d_cam = np.stack([(uv[:, 0] - spec.width / 2.0) / fx,
                      (uv[:, 1] - spec.height / 2.0) / fy,
                      np.ones(len(uv))], axis=-1)
    dirs = d_cam @ pose.rotation.T
    s, _ = _cast(spec.primitives, pose.translation, dirs)
    return s


def track_visibility(spec: SceneSpec, pose: CameraPose, points: np.ndarray):
    """Project world points into a frame; a point is visible when it lands in
    bounds in front of the camera and nothing occludes it along its ray."""
    proj = project_points(points, pose, spec.width, spec.height)
    u, v, z = proj[:, 0], proj[:, 1], proj[:, 2]
    in_view = (z > NEAR_PLANE) & (u >= 0) & (u < spec.width) & (v >= 0) & (v < spec.height)
    vis = np.zeros(len(points), dtype=bool)
    if in_view.any():
        hit = _depth_at(spec, pose, proj[in_view, :2])
        vis[in_view] = np.abs(hit - z[in_view]) <= VISIBILITY_DEPTH_TOL * np.maximum(1.0, z[in_view])
    return proj[:, :2], vis


def render_sequence(spec: SceneSpec) -> list[SceneFrameGT]:
    if not spec.primitives:
        raise ValueError("render_sequence: scene has no primitives")
    if spec.frame_count < 1:
        raise ValueError("render_sequence: need at least one frame")
    poses = spec.trajectory.poses(spec.frame_count, spec.fov)
    rng = np.random.default_rng(spec.seed)

    frames = []
    first = _render_frame(spec, poses[0])
    image, depth, pmap, valid = first
    # track targets: surface points seen through random valid frame-1 pixels
    flat_valid = np.flatnonzero(valid.reshape(-1))
    if len(flat_valid) == 0:
        raise ValueError("render_sequence: frame 1 sees no surface")
    count = min(spec.track_count, len(flat_valid))
    chosen = rng.choice(flat_valid, size=count, replace=False)
    track_points = pmap.reshape(3, -1).T[chosen]

    for t, pose in enumerate(poses):
        if t == 0:
            img, dep, pm, vd = first
        else:
            img, dep, pm, vd = _render_frame(spec, pose)
        uv, vis = track_visibility(spec, pose, track_points)
        frames.append(SceneFrameGT(image=img, depth=dep, point_map=pm, pose=pose,
                                   tracks=uv, visibility=vis, valid=vd))
    return frames


def reanchor_window(window: list[SceneFrameGT]) -> list[SceneFrameGT]:
    """Re-express a mid-sequence window in its own first camera's frame.

    The world frame is defined by whatever frame comes first, so a training
    window cut from the middle of a sequence needs its poses and point maps
    transformed, and its track set reduced to the points visible in the new
    first frame (those are the only legal queries).
    """
    base = window[0].pose
    rb = base.rotation
    tb = base.translation
    keep = np.flatnonzero(window[0].visibility)
    out = []
    for fr in window:
        pose = CameraPose(rb.T @ (fr.pose.translation - tb),
                          rot_to_quat(rb.T @ fr.pose.rotation), fr.pose.fov)
        pts = fr.point_map.reshape(3, -1).T
        pts = (pts - tb) @ rb
        pmap = np.where(fr.valid.reshape(-1)[:, None], pts, 0.0)
        pmap = pmap.T.reshape(fr.point_map.shape).astype(np.float32)
        out.append(SceneFrameGT(image=fr.image, depth=fr.depth, point_map=pmap,
                                pose=pose, tracks=fr.tracks[keep],
                                visibility=fr.visibility[keep], valid=fr.valid))
    return out


# ---------------------------------------------------------------------------
# The random scene family used for training and evaluation
# ---------------------------------------------------------------------------

def _palette(rng):
    base = rng.uniform(0.25, 1.0, size=3)
    alt = np.clip(base * rng.uniform(0.2, 0.6), 0.02, 1.0)
    if rng.random() < 0.5:
        base, alt = alt, base
    return np.stack([base, alt])


def random_scene_spec(seed: int, height: int = 32, width: int = 32,
                      frame_count: int = 8, track_count: int = 8,
                      motion: float = 1.5) -> SceneSpec:
    """A room-like scene (ground + backdrop + 1-2 textured objects) with a
    gently-curved camera path whose direction is near-constant over any short
    window; half the scenes translate with a fixed orientation, half turn to
    keep a target centered."""
    rng = np.random.default_rng(seed)
    # world-constant checker periods: image-space texture density then encodes
    # distance, keeping monocular depth identifiable at 32x32
    prims = [
        Rect(center=np.array([0.0, 1.15, 3.2]), u_vec=np.array([4.5, 0.0, 0.0]),
             v_vec=np.array([0.0, 0.0, 3.4]), colors=_palette(rng),
             checker_scale=1.3),
        Rect(center=np.array([0.0, -0.4, 6.3]), u_vec=np.array([5.0, 0.0, 0.0]),
             v_vec=np.array([0.0, 2.8, 0.0]), colors=_palette(rng),
             checker_scale=0.9),
    ]
    n_objects = rng.integers(1, 3)
    for _ in range(n_objects):
        center = np.array([rng.uniform(-1.1, 1.1), rng.uniform(-0.1, 0.7),
                           rng.uniform(2.2, 3.8)])
        if rng.random() < 0.5:
            prims.append(Sphere(center=center, radius=rng.uniform(0.35, 0.65),
                                colors=_palette(rng), checker_scale=2.2))
        else:
            prims.append(Box(center=center, half_sizes=rng.uniform(0.25, 0.5, size=3),
                             colors=_palette(rng), checker_scale=2.2))

    # one control point per ~5 frames keeps sub-windows close to straight;
    # later steps revert toward the start so long paths stay facing the scene
    n_segments = max(1, round(frame_count / 5))
    pos = np.zeros(3)
    controls = [pos]
    for s in range(n_segments):
        step = np.array([rng.uniform(-0.55, 0.55), rng.uniform(-0.22, 0.22),
                         rng.uniform(0.25, 0.75) if s == 0 else rng.uniform(-0.4, 0.5)])
        step = step * motion - 0.3 * pos
        pos = pos + step
        controls.append(pos)
    controls = np.asarray(controls)
    orientation = "fixed" if rng.random() < 0.5 else "look_at"
    target = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.2, 0.3),
                       rng.uniform(2.6, 3.6)])
    traj = TrajectorySpec(kind="spline", controls=controls, target=target,
                          orientation=orientation)
    return SceneSpec(height=height, width=width, frame_count=frame_count,
                     track_count=track_count, seed=int(rng.integers(1 << 31)),
                     primitives=prims, trajectory=traj)


# ---------------------------------------------------------------------------
# Dataset container: one sequence per file, little-endian 32-bit floats
# ---------------------------------------------------------------------------

_DATA_MAGIC = b"S4DD"
_DATA_VERSION = 1


def dataset_write(path, frames: list[SceneFrameGT]):
    if not frames:
        raise ValueError("dataset_write: empty sequence")
    h, w = frames[0].depth.shape
    m = frames[0].tracks.shape[0]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIIII", _DATA_MAGIC, _DATA_VERSION, len(frames), h, w, m))
        for fr in frames:
            for arr, shape in ((fr.image, (3, h, w)), (fr.depth, (h, w)),
                               (fr.point_map, (3, h, w))):
                if arr.shape != shape:
                    raise ValueError(f"dataset_write: field shape {arr.shape} != {shape}")
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(fr.valid, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(fr.pose.as_vector(), dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(fr.tracks.T, dtype="<f4").tobytes())  # (2, M)
            fh.write(np.ascontiguousarray(fr.visibility, dtype="<f4").tobytes())


def _read_exact(fh, count, path):
    buf = fh.read(count)
    if len(buf) != count:
        raise DatasetFormatError(f"{path}: truncated file")
    return buf


def dataset_read(path) -> list[SceneFrameGT]:
    with open(path, "rb") as fh:
        head = _read_exact(fh, 24, path)
        magic, version, t, h, w, m = struct.unpack("<4sIIIII", head)
        if magic != _DATA_MAGIC:
            raise DatasetFormatError(f"{path}: bad magic {magic!r}")
        if version != _DATA_VERSION:
            raise DatasetFormatError(f"{path}: unsupported version {version}")
        if t == 0:
            raise DatasetFormatError(f"{path}: empty sequence")
        frames = []
        for _ in range(t):
            def arr(n):
                return np.frombuffer(_read_exact(fh, 4 * n, path), dtype="<f4")
            image = arr(3 * h * w).reshape(3, h, w)
            depth = arr(h * w).reshape(h, w)
            pmap = arr(3 * h * w).reshape(3, h, w)
            valid = arr(h * w).reshape(h, w) > 0.5
            pose = CameraPose.from_vector(arr(9).astype(np.float64))
            tracks = arr(2 * m).reshape(2, m).T.astype(np.float64)
            vis = arr(m) > 0.5
            frames.append(SceneFrameGT(image=np.array(image), depth=np.array(depth),
                                       point_map=np.array(pmap), pose=pose,
                                       tracks=np.array(tracks), visibility=vis,
                                       valid=valid))
        if fh.read(1):
            raise DatasetFormatError(f"{path}: trailing bytes")
    return frames


def export_ply(path, points: np.ndarray, colors: np.ndarray | None = None,
               confidence: np.ndarray | None = None):
    """ASCII point cloud with optional uchar colors and a confidence property."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    lines = ["ply", "format ascii 1.0", f"element vertex {n}",
             "property float x", "property float y", "property float z"]
    if colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    if confidence is not None:
        lines.append("property float confidence")
    lines.append("end_header")
    cols = None if colors is None else np.clip(np.asarray(colors).reshape(-1, 3) * 255, 0, 255)
    conf = None if confidence is None else np.asarray(confidence).reshape(-1)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        for i in range(n):
            row = f"{pts[i, 0]:.6f} {pts[i, 1]:.6f} {pts[i, 2]:.6f}"
            if cols is not None:
                row += f" {int(cols[i, 0])} {int(cols[i, 1])} {int(cols[i, 2])}"
            if conf is not None:
                row += f" {conf[i]:.6f}"
            fh.write(row + "\n")
