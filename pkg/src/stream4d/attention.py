"""Attention modes for the spatio-temporal decoder.

Three ways tokens mix:
  * frame-local spatial self-attention (never crosses frame boundaries);
  * full-sequence temporal attention over ordered frames, with a frame-level
    causal mask (or no mask at all for the global-attention teacher);
  * incremental cross-attention of one new frame against an append-only
    key/value cache holding the projections of all previous frames.

The streaming path is numerically equivalent to the causal full-sequence
path: a frame's temporal-layer keys/values depend only on frames up to and
including itself, so caching them loses nothing.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class CacheError(ValueError):
    """Cache/session misuse: width mismatch, inconsistent layers, bad index."""


@dataclass
class AttentionParams:
    """Projection weights of one attention block (all C x C, bias-free)."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    def __post_init__(self):
        c = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            w = getattr(self, name)
            if w.shape != (c, c):
                raise T.ShapeError(f"AttentionParams.{name}: expected ({c}, {c}), got {w.shape}")
        if c % self.heads != 0:
            raise T.ShapeError(f"width {c} not divisible by {self.heads} heads")

    @property
    def width(self):
        return self.wq.shape[0]


def _heads_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask=None) -> Tensor:
    """Scaled dot-product attention per head; returns concatenated heads."""
    c = q.shape[1]
    d = c // heads
    inv = 1.0 / np.sqrt(d)
    outs = []
    for h in range(heads):
        qh = T.slice_cols(q, h * d, (h + 1) * d)
        kh = T.slice_cols(k, h * d, (h + 1) * d)
        vh = T.slice_cols(v, h * d, (h + 1) * d)
        scores = T.scale(T.matmul(qh, T.transpose(kh)), inv)
        probs = T.softmax_lastdim(scores, mask)
        outs.append(T.matmul(probs, vh))
    return T.concat(outs, axis=1)


def causal_frame_mask(frame_count: int, tokens_per_frame: int, dtype=None):
    """Additive mask letting frame t see all tokens of frames 1..t."""
    fid = np.repeat(np.arange(frame_count), tokens_per_frame)
    allowed = fid[None, :] <= fid[:, None]
    mask = np.where(allowed, 0.0, -np.inf)
    return mask.astype(dtype or T.DEFAULT_DTYPE)


def spatial_self_attention(frames, params: AttentionParams):
    """Each token attends to all tokens of its own frame only."""
    outs = []
    for f in frames:
        if f.shape[0] == 0:
            raise T.ShapeError("spatial_self_attention: empty frame")
        q = T.matmul(f, params.wq)
        k = T.matmul(f, params.wk)
        v = T.matmul(f, params.wv)
        a = _heads_attention(q, k, v, params.heads)
        outs.append(T.matmul(a, params.wo))
    return outs


def temporal_attention(frames, params: AttentionParams, frame_indices, mode="causal"):
    """Full-sequence attention across frames.

    mode="causal": frame t attends to frames 1..t (all their tokens).
    mode="global": every frame attends to every frame (teacher).
    """
    if mode not in ("causal", "global"):
        raise ValueError(f"unknown temporal attention mode {mode!r}")
    idx = list(frame_indices)
    if len(idx) != len(frames):
        raise T.ShapeError("temporal_attention: one frame index per frame required")
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise ValueError(f"temporal_attention: frame indices not ascending: {idx}")
    n_tok = frames[0].shape[0]
    if any(f.shape[0] != n_tok for f in frames):
        raise T.ShapeError("temporal_attention: frames disagree on token count")

    x = T.concat(frames, axis=0) if len(frames) > 1 else frames[0]
    q = T.matmul(x, params.wq)
    k = T.matmul(x, params.wk)
    v = T.matmul(x, params.wv)
    mask = causal_frame_mask(len(frames), n_tok, x.dtype) if mode == "causal" else None
    a = _heads_attention(q, k, v, params.heads, mask)
    out = T.matmul(a, params.wo)
    return [T.slice_rows(out, i * n_tok, (i + 1) * n_tok) for i in range(len(frames))]


def cached_cross_attention(current: Tensor, cache: "KVCache", layer: int,
                           params: AttentionParams):
    """One frame's temporal attention against the cached memory of layer `layer`.

    Queries come from the current frame; keys/values are the cached entries of
    frames 1..T-1 followed by the current frame's own projections. Returns the
    attention output plus the (key, value) arrays to append via cache.append.
    """
    if not 0 <= layer < cache.layer_count:
        raise CacheError(f"layer index {layer} out of range 0..{cache.layer_count - 1}")
    if params.width != cache.width:
        raise CacheError(f"token width mismatch: params {params.width}, cache {cache.width}")
    if current.shape[1] != cache.width:
        raise CacheError(f"token width mismatch: frame {current.shape[1]}, cache {cache.width}")
    q = T.matmul(current, params.wq)
    k = T.matmul(current, params.wk)
    v = T.matmul(current, params.wv)
    ck, cv = cache.layer_kv(layer)
    if ck.shape[0]:
        k_full = T.concat([T.constant(ck), k], axis=0)
        v_full = T.concat([T.constant(cv), v], axis=0)
    else:
        k_full, v_full = k, v
    a = _heads_attention(q, k_full, v_full, params.heads)
    out = T.matmul(a, params.wo)
    return out, k.numpy(), v.numpy()


_SNAPSHOT_MAGIC = b"S4DC"
_SNAPSHOT_VERSION = 1


class KVCache:
    """Per-layer append-only key/value token memory for one streaming session.

    Entries of layer i are the temporal-attention key/value projections of
    every frame already processed, packed as (frames * tokens_per_frame, C)
    with heads side by side in the column dimension.
    """

    def __init__(self, layer_count: int, tokens_per_frame: int, width: int, heads: int):
        if width % heads != 0:
            raise CacheError(f"width {width} not divisible by {heads} heads")
        self.layer_count = layer_count
        self.tokens_per_frame = tokens_per_frame
        self.width = width
        self.heads = heads
        self._keys = [np.zeros((0, width), dtype=np.float32) for _ in range(layer_count)]
        self._values = [np.zeros((0, width), dtype=np.float32) for _ in range(layer_count)]

    def layer_frames(self, layer: int) -> int:
        return self._keys[layer].shape[0] // self.tokens_per_frame

    @property
    def frame_count(self) -> int:
        self.assert_consistent()
        return self.layer_frames(0) if self.layer_count else 0

    def assert_consistent(self):
        counts = {self.layer_frames(i) for i in range(self.layer_count)}
        if len(counts) > 1:
            raise CacheError(f"inconsistent session: per-layer frame counts {sorted(counts)}")

    def layer_kv(self, layer: int):
        return self._keys[layer], self._values[layer]

    def append(self, layer: int, k: np.ndarray, v: np.ndarray):
        """Append one frame's key/value rows to a layer. Existing entries are
        never touched."""
        if not 0 <= layer < self.layer_count:
            raise CacheError(f"layer index {layer} out of range")
        k = np.asarray(k, dtype=np.float32)
        v = np.asarray(v, dtype=np.float32)
        want = (self.tokens_per_frame, self.width)
        if k.shape != want or v.shape != want:
            raise CacheError(f"append: expected {want} per frame, got {k.shape}/{v.shape}")
        self._keys[layer] = np.concatenate([self._keys[layer], k], axis=0)
        self._values[layer] = np.concatenate([self._values[layer], v], axis=0)

    def payload_bytes(self) -> int:
        return sum(a.nbytes for a in self._keys) + sum(a.nbytes for a in self._values)

    def save(self, path):
        """Snapshot for session suspend/resume: header + raw LE K/V buffers."""
        t_cached = self.frame_count  # also validates consistency
        header = struct.pack("<4sIIIII", _SNAPSHOT_MAGIC, _SNAPSHOT_VERSION,
                             self.layer_count, t_cached, self.tokens_per_frame,
                             self.width)
        header += struct.pack("<I", self.heads)
        with open(path, "wb") as fh:
            fh.write(header)
            for layer in range(self.layer_count):
                fh.write(np.ascontiguousarray(self._keys[layer], dtype="<f4").tobytes())
                fh.write(np.ascontiguousarray(self._values[layer], dtype="<f4").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            head = fh.read(28)
            if len(head) < 28:
                raise CacheError(f"{path}: truncated snapshot header")
            magic, version, layers, t_cached, n_tok, width = struct.unpack("<4sIIIII", head[:24])
            (heads,) = struct.unpack("<I", head[24:28])
            if magic != _SNAPSHOT_MAGIC:
                raise CacheError(f"{path}: bad magic {magic!r}")
            if version != _SNAPSHOT_VERSION:
                raise CacheError(f"{path}: unsupported snapshot version {version}")
            cache = cls(layers, n_tok, width, heads)
            rows = t_cached * n_tok
            for layer in range(layers):
                buf = fh.read(rows * width * 4 * 2)
                if len(buf) != rows * width * 4 * 2:
                    raise CacheError(f"{path}: truncated K/V payload at layer {layer}")
                k = np.frombuffer(buf[: rows * width * 4], dtype="<f4").reshape(rows, width)
                v = np.frombuffer(buf[rows * width * 4:], dtype="<f4").reshape(rows, width)
                cache._keys[layer] = np.array(k, dtype=np.float32)
                cache._values[layer] = np.array(v, dtype=np.float32)
            if fh.read(1):
                raise CacheError(f"{path}: trailing bytes after snapshot payload")
        return cache
