"""Cross-frame attention fusion of overhead feature maps.

Each projected frame is turned into query/key/value maps by a two-layer 3x3
convolution stack. At every canvas pixel the frames attend to each other via
a softmax over channel dot products, and the attended values are averaged
into one fused map.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptySequence
from .geometry import FeatureMap


def conv3x3(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-size 3x3 cross-correlation with zero padding.

    ``x`` is (H, W, C_in), ``weight`` is (3, 3, C_in, C_out), ``bias`` is (C_out,).
    """
    H, W, _ = x.shape
    padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    out = np.broadcast_to(bias, (H, W, weight.shape[3])).copy()
    for dy in range(3):
        for dx in range(3):
            out += padded[dy:dy + H, dx:dx + W] @ weight[dy, dx]
    return out


@dataclass
class ConvStack:
    """Two 3x3 conv layers with an optional ReLU between them."""

    weight1: np.ndarray
    bias1: np.ndarray
    weight2: np.ndarray
    bias2: np.ndarray
    relu: bool = True

    def __post_init__(self):
        self.weight1 = np.asarray(self.weight1, dtype=np.float64)
        self.weight2 = np.asarray(self.weight2, dtype=np.float64)
        self.bias1 = np.asarray(self.bias1, dtype=np.float64).reshape(-1)
        self.bias2 = np.asarray(self.bias2, dtype=np.float64).reshape(-1)
        if self.weight1.shape[:2] != (3, 3) or self.weight2.shape[:2] != (3, 3):
            raise DimensionMismatch("conv kernels must be 3x3")
        if self.weight1.shape[3] != self.weight2.shape[2]:
            raise DimensionMismatch("layer 1 output channels must feed layer 2 input channels")
        if self.bias1.size != self.weight1.shape[3] or self.bias2.size != self.weight2.shape[3]:
            raise DimensionMismatch("bias length must equal layer output channels")
        for arr in (self.weight1, self.weight2, self.bias1, self.bias2):
            if not np.all(np.isfinite(arr)):
                raise ValueError("conv weights must be finite")

    @property
    def in_channels(self) -> int:
        return self.weight1.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weight2.shape[3]

    @classmethod
    def identity(cls, channels: int) -> "ConvStack":
        """Center-tap identity kernels, zero bias, no ReLU: a pure passthrough."""
        w = np.zeros((3, 3, channels, channels))
        w[1, 1] = np.eye(channels)
        b = np.zeros(channels)
        return cls(w, b, w.copy(), b.copy(), relu=False)

    @classmethod
    def random(cls, in_channels: int, out_channels: int, seed: int = 0,
               scale: float = 0.3) -> "ConvStack":
        rng = np.random.default_rng(seed)
        return cls(
            scale * rng.standard_normal((3, 3, in_channels, out_channels)),
            scale * rng.standard_normal(out_channels),
            scale * rng.standard_normal((3, 3, out_channels, out_channels)),
            scale * rng.standard_normal(out_channels),
        )

    def __call__(self, fmap: FeatureMap) -> FeatureMap:
        if fmap.channels != self.in_channels:
            raise DimensionMismatch(
                f"map has {fmap.channels} channels, conv stack expects {self.in_channels}"
            )
        # masked pixels already hold zeros, so they act like padding
        hidden = conv3x3(fmap.data, self.weight1, self.bias1)
        if self.relu:
            hidden = np.maximum(hidden, 0.0)
        out = conv3x3(hidden, self.weight2, self.bias2)
        return FeatureMap(out, fmap.mask)


@dataclass
class AttentionTensor:
    """Per-pixel attention weights ``values[i, j, row, col]`` plus pixel validity."""

    values: np.ndarray
    valid: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def qkv_transform(frame: FeatureMap, weights) -> tuple:
    """Apply the query, key and value conv stacks to one projected frame."""
    wq, wk, wv = weights
    return wq(frame), wk(frame), wv(frame)


def _stack(maps: Sequence[FeatureMap]):
    shapes = {m.shape for m in maps}
    if len(shapes) != 1:
        raise DimensionMismatch(f"maps disagree in shape: {sorted(shapes)}")
    return np.stack([m.data for m in maps]), np.stack([m.mask for m in maps])


def attention_matrix(Q: Sequence[FeatureMap], K: Sequence[FeatureMap],
                     scale_logits: bool = False) -> AttentionTensor:
    """Softmax over frames ``j`` of the per-pixel dot products ``Q_i . K_j``.

    Frames masked at a pixel get a logit of -inf there. Pixels where every
    frame is masked get an all-zero row and are marked invalid.
    """
    if len(Q) == 0 or len(K) == 0:
        raise EmptySequence("attention needs at least one frame")
    if len(Q) != len(K):
        raise DimensionMismatch("Q and K must list the same number of frames")
    q, _ = _stack(Q)
    k, kmask = _stack(K)
    if q.shape != k.shape:
        raise DimensionMismatch("Q and K maps must share a shape")
    logits = np.einsum("ihwc,jhwc->ijhw", q, k)
    if scale_logits:
        logits = logits / np.sqrt(q.shape[-1])
    logits = np.where(kmask[None], logits, -np.inf)
    valid = kmask.any(axis=0)
    peak = np.max(logits, axis=1, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.exp(logits - peak)
    denom = e.sum(axis=1, keepdims=True)
    M = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    return AttentionTensor(M, valid)


def pcsf_fuse(M: AttentionTensor, V: Sequence[FeatureMap]) -> FeatureMap:
    """``F[p] = (1/N) sum_i sum_j M[i, j, p] V_j[p]``."""
    if len(V) == 0:
        raise EmptySequence("nothing to fuse")
    v, vmask = _stack(V)
    N = v.shape[0]
    if M.values.shape != (N, N) + v.shape[1:3]:
        raise DimensionMismatch(
            f"attention shape {M.values.shape} does not match {N} value maps of {v.shape[1:3]}"
        )
    # sum over i first: column weights per frame j
    col = M.values.sum(axis=0) / N
    fused = np.einsum("jhw,jhwc->hwc", col, v)
    return FeatureMap(fused, vmask.any(axis=0))


def mean_fuse(frames: Sequence[FeatureMap]) -> FeatureMap:
    """Mask-weighted per-pixel mean."""
    if len(frames) == 0:
        raise EmptySequence("nothing to fuse")
    data, mask = _stack(frames)
    count = mask.sum(axis=0)
    total = data.sum(axis=0)
    out = np.divide(total, count[:, :, None], out=np.zeros_like(total), where=count[:, :, None] > 0)
    return FeatureMap(out, count > 0)


def fuse_sequence(frames: Sequence[FeatureMap], weights=None, mode: str = "pcsf",
                  scale_logits: bool = False) -> FeatureMap:
    """Fuse a projected sequence. ``weights`` is a (Q, K, V) ConvStack triple;
    ``None`` means identity stacks."""
    if len(frames) == 0:
        raise EmptySequence("nothing to fuse")
    if mode == "mean":
        return mean_fuse(frames)
    if mode != "pcsf":
        raise ValueError(f"unknown fusion mode {mode!r}")
    if weights is None:
        ident = ConvStack.identity(frames[0].channels)
        weights = (ident, ident, ident)
    qkv = [qkv_transform(f, weights) for f in frames]
    Q, K, V = (list(t) for t in zip(*qkv))
    return pcsf_fuse(attention_matrix(Q, K, scale_logits), V)
