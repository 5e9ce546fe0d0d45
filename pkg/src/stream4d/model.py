"""End-to-end network: patch encoder, alternating spatio-temporal decoder
with a per-frame camera token, and the camera / geometry / track heads.

The same weights serve three execution modes:
  * decode_training(..., mode="causal"): full-sequence forward where frame t
    only sees frames 1..t (the student);
  * decode_training(..., mode="global"): unmasked all-to-all forward (the
    teacher used for distillation);
  * decode_streaming: one frame at a time against a KVCache, numerically
    matching the causal full-sequence path.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .attention import (AttentionParams, KVCache, cached_cross_attention,
                        spatial_self_attention, temporal_attention)
from .geometry import CameraPose
from .tensor import Tensor

CONF_RAW_MAX = 30.0  # caps 1 + exp(raw) so confidences cannot overflow


@dataclass
class ModelConfig:
    height: int = 32
    width: int = 32
    patch_size: int = 8
    channels: int = 64
    layers: int = 4
    heads: int = 4
    track_features: int = 8
    max_frames: int = 64
    mlp_ratio: int = 4
    camera_hidden: int = 64
    geo_hidden: int = 32
    vis_hidden: int = 8

    def __post_init__(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError(f"image {self.height}x{self.width} not divisible by "
                             f"patch size {self.patch_size}")
        if self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.layers < 1 or self.max_frames < 1:
            raise ValueError("layers and max_frames must be positive")

    @property
    def grid_h(self):
        return self.height // self.patch_size

    @property
    def grid_w(self):
        return self.width // self.patch_size

    @property
    def patches(self):
        return self.grid_h * self.grid_w

    @property
    def tokens_per_frame(self):
        return self.patches + 1  # camera token first

    @property
    def geo_out_channels(self):
        return 6 + self.track_features  # point(3) + pconf + depth + dconf + features

    @property
    def upsample_factors(self):
        """Two stage factors multiplying to patch_size."""
        p = self.patch_size
        if p == 1:
            return 1, 1
        if p % 2 == 0:
            return p // 2, 2
        return p, 1


@dataclass
class FrameTokens:
    """Encoder output for one frame: camera token first, then patch tokens."""

    tokens: Tensor
    frame_index: int

    def __post_init__(self):
        if self.frame_index < 1:
            raise ValueError(f"frame_index must be >= 1, got {self.frame_index}")


@dataclass
class PredictionSet:
    """Per-frame model outputs in plain numpy form."""

    pose: CameraPose
    point_map: np.ndarray      # (3, H, W), frame-1 world coordinates
    point_conf: np.ndarray     # (H, W), >= 1
    depth: np.ndarray          # (H, W), camera-frame z-depth
    depth_conf: np.ndarray     # (H, W), >= 1
    tracks: np.ndarray         # (2, M): row 0 = u, row 1 = v, pixels
    visibility: np.ndarray     # (M,) logits

    def __post_init__(self):
        if (self.point_conf < 1.0 - 1e-5).any() or (self.depth_conf < 1.0 - 1e-5).any():
            raise ValueError("confidence maps must be >= 1 everywhere")


def canonical_unit_quaternion(q_raw: Tensor) -> Tensor:
    """Normalize a raw (1, 4) quaternion and flip so w (last entry) is >= 0."""
    s = T.sum_all(T.mul(q_raw, q_raw))
    inv_norm = T.reciprocal(T.sqrt(T.add_scalar(s, 1e-12)))
    q = T.scale_by(q_raw, inv_norm)
    if q.data[0, 3] < 0:
        q = T.scale(q, -1.0)
    return q


def _confidence(raw: Tensor) -> Tensor:
    """Map raw activations to confidences in [1, 1 + e^CONF_RAW_MAX]."""
    return T.add_scalar(T.exp(T.clip(raw, None, CONF_RAW_MAX)), 1.0)


def _init_weights(config: ModelConfig, rng: np.random.Generator):
    """Named parameter directory. Residual output projections get a
    1/sqrt(2L) damped init; biases start at zero except the quaternion w."""
    c = config.channels
    std = 0.02
    out_std = std / np.sqrt(2.0 * config.layers)
    p = {}

    def normal(shape, s=std):
        return T.param(rng.normal(0.0, s, size=shape))

    patch_dim = 3 * config.patch_size ** 2
    p["encoder.patch.weight"] = normal((patch_dim, c))
    p["encoder.patch.bias"] = T.param(np.zeros(c))
    p["encoder.pos"] = normal((config.patches, c))
    p["encoder.camera_token"] = normal((1, c))
    p["encoder.time"] = normal((config.max_frames, c))

    for i in range(config.layers):
        for part in ("spatial", "temporal"):
            p[f"decoder.{i}.{part}.norm.gain"] = T.param(np.ones(c))
            p[f"decoder.{i}.{part}.norm.bias"] = T.param(np.zeros(c))
            p[f"decoder.{i}.{part}.wq"] = normal((c, c))
            p[f"decoder.{i}.{part}.wk"] = normal((c, c))
            p[f"decoder.{i}.{part}.wv"] = normal((c, c))
            p[f"decoder.{i}.{part}.wo"] = normal((c, c), out_std)
        hidden = config.mlp_ratio * c
        p[f"decoder.{i}.mlp.norm.gain"] = T.param(np.ones(c))
        p[f"decoder.{i}.mlp.norm.bias"] = T.param(np.zeros(c))
        p[f"decoder.{i}.mlp.w1"] = normal((c, hidden))
        p[f"decoder.{i}.mlp.b1"] = T.param(np.zeros(hidden))
        p[f"decoder.{i}.mlp.w2"] = normal((hidden, c), out_std)
        p[f"decoder.{i}.mlp.b2"] = T.param(np.zeros(c))

    p["decoder.final_norm.gain"] = T.param(np.ones(c))
    p["decoder.final_norm.bias"] = T.param(np.zeros(c))

    ch = config.camera_hidden
    p["camera.w1"] = normal((c, ch))
    p["camera.b1"] = T.param(np.zeros(ch))
    p["camera.w2"] = normal((ch, ch))
    p["camera.b2"] = T.param(np.zeros(ch))
    p["camera.w3"] = normal((ch, 9))
    cam_bias = np.zeros(9)
    cam_bias[6] = 1.0  # start at the identity quaternion (w slot)
    p["camera.b3"] = T.param(cam_bias)

    s1, s2 = config.upsample_factors
    p["geometry.stage1.weight"] = normal((c, s1 * s1 * config.geo_hidden))
    p["geometry.stage1.bias"] = T.param(np.zeros(s1 * s1 * config.geo_hidden))
    p["geometry.stage2.weight"] = normal((config.geo_hidden, s2 * s2 * config.geo_out_channels))
    p["geometry.stage2.bias"] = T.param(np.zeros(s2 * s2 * config.geo_out_channels))

    # soft-argmax sharpness: starts at 1/sqrt(F) like attention scaling
    p["track.temp"] = T.param(np.full((1,), -0.5 * np.log(config.track_features)))
    p["track.vis.w1"] = normal((1, config.vis_hidden))
    p["track.vis.b1"] = T.param(np.zeros(config.vis_hidden))
    p["track.vis.w2"] = normal((config.vis_hidden, 1))
    p["track.vis.b2"] = T.param(np.zeros(1))
    return p


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split a (3, H, W) image into non-overlapping flattened patches."""
    c, h, w = image.shape
    gh, gw = h // patch_size, w // patch_size
    x = image.reshape(c, gh, patch_size, gw, patch_size)
    return x.transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * patch_size * patch_size)


def _pixel_centers(height: int, width: int) -> np.ndarray:
    """(H*W, 2) array of (u, v) pixel-center coordinates, row-major."""
    j, i = np.meshgrid(np.arange(width), np.arange(height))
    return np.stack([j + 0.5, i + 0.5], axis=-1).reshape(-1, 2)


def bilinear_sample_matrix(points: np.ndarray, height: int, width: int) -> np.ndarray:
    """(M, H*W) matrix S such that S @ feature_map samples the map at `points`.

    Points are continuous (u, v) image coordinates; sampling interpolates the
    four surrounding pixel centers, clamped at the border.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if ((pts[:, 0] < 0) | (pts[:, 0] > width) | (pts[:, 1] < 0) | (pts[:, 1] > height)).any():
        raise ValueError("query point outside image bounds")
    m = pts.shape[0]
    s = np.zeros((m, height * width))
    x = np.clip(pts[:, 0] - 0.5, 0.0, width - 1.0)
    y = np.clip(pts[:, 1] - 0.5, 0.0, height - 1.0)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx = x - x0
    fy = y - y0
    rows = np.arange(m)
    np.add.at(s, (rows, y0 * width + x0), (1 - fx) * (1 - fy))
    np.add.at(s, (rows, y0 * width + x1), fx * (1 - fy))
    np.add.at(s, (rows, y1 * width + x0), (1 - fx) * fy)
    np.add.at(s, (rows, y1 * width + x1), fx * fy)
    return s


class Model:
    """Weights plus the forward passes; attention_mode picks causal/global."""

    def __init__(self, config: ModelConfig, seed: int = 0, attention_mode: str = "causal",
                 params: dict | None = None):
        if attention_mode not in ("causal", "global"):
            raise ValueError(f"unknown attention mode {attention_mode!r}")
        self.config = config
        self.attention_mode = attention_mode
        self.params = params if params is not None else _init_weights(
            config, np.random.default_rng(seed))
        self._coords = _pixel_centers(config.height, config.width)

    # -- parameter access -------------------------------------------------

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def _attn(self, layer: int, part: str) -> AttentionParams:
        p = self.params
        return AttentionParams(p[f"decoder.{layer}.{part}.wq"],
                               p[f"decoder.{layer}.{part}.wk"],
                               p[f"decoder.{layer}.{part}.wv"],
                               p[f"decoder.{layer}.{part}.wo"],
                               heads=self.config.heads)

    def _norm(self, x: Tensor, name: str) -> Tensor:
        return T.layernorm(x, self.params[f"{name}.gain"], self.params[f"{name}.bias"])

    # -- encoder -----------------------------------------------------------

    def encode(self, image: np.ndarray, frame_index: int) -> FrameTokens:
        """Patch-embed one (3, H, W) image in [0, 1] and tag it with its time step."""
        cfg = self.config
        image = np.asarray(image)
        if image.shape != (3, cfg.height, cfg.width):
            raise T.ShapeError(f"encode: image shape {image.shape} != "
                               f"(3, {cfg.height}, {cfg.width})")
        if not 1 <= frame_index <= cfg.max_frames:
            raise ValueError(f"frame_index {frame_index} outside 1..{cfg.max_frames}")
        patches = patchify(image.astype(np.float64) * 2.0 - 1.0, cfg.patch_size)
        x = T.matmul(T.constant(patches), self.params["encoder.patch.weight"])
        x = T.add_rowvec(x, self.params["encoder.patch.bias"])
        x = T.add(x, self.params["encoder.pos"])
        tokens = T.concat([self.params["encoder.camera_token"], x], axis=0)
        time_row = T.slice_rows(self.params["encoder.time"], frame_index - 1, frame_index)
        tokens = T.add_rowvec(tokens, T.reshape(time_row, (cfg.channels,)))
        return FrameTokens(tokens=tokens, frame_index=frame_index)

    # -- decoder -----------------------------------------------------------

    def _mlp(self, x: Tensor, layer: int) -> Tensor:
        p = self.params
        h = self._norm(x, f"decoder.{layer}.mlp.norm")
        h = T.add_rowvec(T.matmul(h, p[f"decoder.{layer}.mlp.w1"]), p[f"decoder.{layer}.mlp.b1"])
        h = T.gelu(h)
        h = T.add_rowvec(T.matmul(h, p[f"decoder.{layer}.mlp.w2"]), p[f"decoder.{layer}.mlp.b2"])
        return T.add(x, h)

    def decode_training(self, frames: list[FrameTokens], mode: str | None = None):
        """Full-sequence decode; returns one geometry token matrix per frame."""
        cfg = self.config
        if not 1 <= len(frames) <= cfg.max_frames:
            raise ValueError(f"frame count {len(frames)} outside 1..{cfg.max_frames}")
        mode = mode or self.attention_mode
        indices = [f.frame_index for f in frames]
        xs = [f.tokens for f in frames]
        for layer in range(cfg.layers):
            normed = [self._norm(x, f"decoder.{layer}.spatial.norm") for x in xs]
            att = spatial_self_attention(normed, self._attn(layer, "spatial"))
            xs = [T.add(x, a) for x, a in zip(xs, att)]
            normed = [self._norm(x, f"decoder.{layer}.temporal.norm") for x in xs]
            att = temporal_attention(normed, self._attn(layer, "temporal"), indices, mode)
            xs = [T.add(x, a) for x, a in zip(xs, att)]
            xs = [self._mlp(x, layer) for x in xs]
        return [self._norm(x, "decoder.final_norm") for x in xs]

    def new_cache(self) -> KVCache:
        cfg = self.config
        return KVCache(cfg.layers, cfg.tokens_per_frame, cfg.channels, cfg.heads)

    def decode_streaming(self, frame: FrameTokens, cache: KVCache) -> Tensor:
        """Incremental decode of one frame; appends its K/V to every layer."""
        cfg = self.config
        cache.assert_consistent()
        x = frame.tokens
        for layer in range(cfg.layers):
            normed = self._norm(x, f"decoder.{layer}.spatial.norm")
            att = spatial_self_attention([normed], self._attn(layer, "spatial"))[0]
            x = T.add(x, att)
            normed = self._norm(x, f"decoder.{layer}.temporal.norm")
            att, k_new, v_new = cached_cross_attention(normed, cache, layer,
                                                       self._attn(layer, "temporal"))
            cache.append(layer, k_new, v_new)
            x = T.add(x, att)
            x = self._mlp(x, layer)
        return self._norm(x, "decoder.final_norm")

    # -- heads ---------------------------------------------------------------

    def camera_head(self, g: Tensor, prev_translation: Tensor | None = None) -> Tensor:
        """Camera token -> (1, 9) pose vector: t(3) | unit quat(4) | fov(2).

        The raw translation slot is a per-frame increment: the head predicts
        the motion since the previous frame and the absolute translation is
        the running sum (prev_translation=None means this is frame 1). The
        increment is what a frame pair actually shows, so reading it directly
        keeps adjacent-frame relative poses sharp.
        """
        p = self.params
        h = T.slice_rows(g, 0, 1)
        h = T.gelu(T.add_rowvec(T.matmul(h, p["camera.w1"]), p["camera.b1"]))
        h = T.gelu(T.add_rowvec(T.matmul(h, p["camera.w2"]), p["camera.b2"]))
        raw = T.add_rowvec(T.matmul(h, p["camera.w3"]), p["camera.b3"])
        trans = T.slice_cols(raw, 0, 3)
        if prev_translation is not None:
            trans = T.add(prev_translation, trans)
        quat = canonical_unit_quaternion(T.slice_cols(raw, 3, 7))
        fov = T.scale(T.sigmoid(T.slice_cols(raw, 7, 9)), np.pi)
        return T.concat([trans, quat, fov], axis=1)

    def geometry_head(self, g: Tensor) -> dict:
        """Patch tokens -> dense maps: points, confidences, depth, track features."""
        cfg = self.config
        p = self.params
        s1, s2 = cfg.upsample_factors
        x = T.slice_rows(g, 1, cfg.tokens_per_frame)
        x = T.add_rowvec(T.matmul(x, p["geometry.stage1.weight"]), p["geometry.stage1.bias"])
        x = T.pixel_shuffle_tokens(x, cfg.grid_h, cfg.grid_w, s1)
        x = T.gelu(x)
        x = T.add_rowvec(T.matmul(x, p["geometry.stage2.weight"]), p["geometry.stage2.bias"])
        x = T.pixel_shuffle_tokens(x, cfg.grid_h * s1, cfg.grid_w * s1, s2)
        return {
            "points": T.slice_cols(x, 0, 3),
            "point_conf": _confidence(T.slice_cols(x, 3, 4)),
            "depth": T.slice_cols(x, 4, 5),
            "depth_conf": _confidence(T.slice_cols(x, 5, 6)),
            "track_features": T.slice_cols(x, 6, 6 + cfg.track_features),
        }

    def track_query_features(self, frame1_features: Tensor, queries: np.ndarray) -> Tensor:
        """Bilinearly sample the frame-1 feature map at the query points."""
        cfg = self.config
        sampler = bilinear_sample_matrix(queries, cfg.height, cfg.width)
        return T.matmul(T.constant(sampler), frame1_features)

    def track_correlate(self, query_features: Tensor, frame_features: Tensor):
        """Correlate query features against one frame's feature map.

        Soft-argmax over the correlation map gives the track position; a tiny
        MLP on the correlation peak gives the visibility logit.
        """
        p = self.params
        inv_temp = T.exp(p["track.temp"])
        corr = T.scale_by(T.matmul(query_features, T.transpose(frame_features)), inv_temp)
        probs = T.softmax_lastdim(corr)
        pts = T.matmul(probs, T.constant(self._coords))
        peak = T.max_lastdim(corr)
        h = T.gelu(T.add_rowvec(T.matmul(peak, p["track.vis.w1"]), p["track.vis.b1"]))
        vis = T.add_rowvec(T.matmul(h, p["track.vis.w2"]), p["track.vis.b2"])
        return pts, vis

    def track_head(self, features: list[Tensor], queries: np.ndarray):
        """Track frame-1 query points through every frame's feature map."""
        qf = self.track_query_features(features[0], queries)
        tracks, vis = [], []
        for feat in features:
            pts, v = self.track_correlate(qf, feat)
            tracks.append(pts)
            vis.append(v)
        return tracks, vis

    # -- full forward passes ---------------------------------------------

    def forward_sequence(self, images, frame_indices=None, queries=None,
                         mode: str | None = None):
        """Tensor-valued forward over a whole sequence (training path).

        Returns a list of per-frame dicts with keys pose9, points, point_conf,
        depth, depth_conf, and, when queries are given, tracks and visibility.
        """
        if frame_indices is None:
            frame_indices = list(range(1, len(images) + 1))
        frames = [self.encode(img, idx) for img, idx in zip(images, frame_indices)]
        gs = self.decode_training(frames, mode=mode)
        outs = []
        feats = []
        prev_translation = None
        for g in gs:
            head = self.geometry_head(g)
            head["pose9"] = self.camera_head(g, prev_translation)
            prev_translation = T.slice_cols(head["pose9"], 0, 3)
            feats.append(head.pop("track_features"))
            outs.append(head)
        if queries is not None and len(queries):
            tracks, vis = self.track_head(feats, queries)
            for out, pts, v in zip(outs, tracks, vis):
                out["tracks"] = pts
                out["visibility"] = v
        return outs

    def predict_sequence(self, images, frame_indices=None, queries=None,
                         mode: str | None = None):
        """Inference wrapper around forward_sequence returning PredictionSets."""
        outs = self.forward_sequence(images, frame_indices, queries, mode)
        return [self._to_prediction(o) for o in outs]

    def _to_prediction(self, out: dict) -> PredictionSet:
        cfg = self.config
        h, w = cfg.height, cfg.width
        if "tracks" in out:
            tracks = out["tracks"].numpy().T
            vis = out["visibility"].numpy().reshape(-1)
        else:
            tracks = np.zeros((2, 0), dtype=np.float32)
            vis = np.zeros(0, dtype=np.float32)
        return PredictionSet(
            pose=CameraPose.from_vector(out["pose9"].numpy().reshape(9)),
            point_map=out["points"].numpy().reshape(h, w, 3).transpose(2, 0, 1),
            point_conf=out["point_conf"].numpy().reshape(h, w),
            depth=out["depth"].numpy().reshape(h, w),
            depth_conf=out["depth_conf"].numpy().reshape(h, w),
            tracks=tracks,
            visibility=vis,
        )


class StreamingSession:
    """One incremental inference session: model weights + a private KVCache.

    Frames must arrive in order; the session never looks at future frames.
    """

    def __init__(self, model: Model, queries: np.ndarray | None = None):
        self.model = model
        self.queries = None if queries is None or not len(queries) else np.asarray(queries)
        self.cache = model.new_cache()
        self._query_features = None
        self._prev_translation = None
        self._next_index = 1

    @property
    def frames_seen(self) -> int:
        return self._next_index - 1

    def step_tensors(self, image: np.ndarray) -> dict:
        """Process the next frame, returning the head outputs as Tensors."""
        model = self.model
        frame = model.encode(image, self._next_index)
        g = model.decode_streaming(frame, self.cache)
        out = model.geometry_head(g)
        out["pose9"] = model.camera_head(g, self._prev_translation)
        self._prev_translation = T.constant(out["pose9"].numpy()[:, 0:3])
        feats = out.pop("track_features")
        if self.queries is not None:
            if self._query_features is None:
                self._query_features = T.constant(
                    model.track_query_features(feats, self.queries).numpy())
            pts, vis = model.track_correlate(self._query_features, feats)
            out["tracks"] = pts
            out["visibility"] = vis
        self._next_index += 1
        return out

    def step(self, image: np.ndarray) -> PredictionSet:
        return self.model._to_prediction(self.step_tensors(image))


# ---------------------------------------------------------------------------
# Checkpoint format: JSON header (config echo + tensor directory) + raw f32 LE
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"S4DW"
_CKPT_VERSION = 1


def save_checkpoint(path, model: Model):
    names = sorted(model.params)
    directory = []
    offset = 0
    for name in names:
        t = model.params[name]
        directory.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += t.size * 4
    header = json.dumps({"config": asdict(model.config), "tensors": directory},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", _CKPT_MAGIC, _CKPT_VERSION, len(header)))
        fh.write(header)
        for name in names:
            fh.write(np.ascontiguousarray(model.params[name].data, dtype="<f4").tobytes())


def load_checkpoint(path, attention_mode: str = "causal") -> Model:
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12:
            raise ValueError(f"{path}: truncated checkpoint header")
        magic, version, hlen = struct.unpack("<4sII", head)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(fh.read(hlen).decode())
        known = {f.name for f in fields(ModelConfig)}
        config = ModelConfig(**{k: v for k, v in meta["config"].items() if k in known})
        expected = _init_weights(config, np.random.default_rng(0))
        params = {}
        for entry in meta["tensors"]:
            name, shape = entry["name"], tuple(entry["shape"])
            if name not in expected:
                raise ValueError(f"{path}: unknown tensor {name!r}")
            if tuple(expected[name].shape) != shape:
                raise ValueError(f"{path}: tensor {name!r} shape {shape} does not match "
                                 f"config-derived {tuple(expected[name].shape)}")
            n = int(np.prod(shape))
            buf = fh.read(n * 4)
            if len(buf) != n * 4:
                raise ValueError(f"{path}: truncated payload at {name!r}")
            params[name] = T.param(np.frombuffer(buf, dtype="<f4").reshape(shape))
        missing = set(expected) - set(params)
        if missing:
            raise ValueError(f"{path}: missing tensors {sorted(missing)[:3]}...")
    return Model(config, attention_mode=attention_mode, params=params)
