"""Camera models and the ground-to-overhead feature warp.

Coordinate conventions
----------------------
World frame: origin at the query camera's ground location, x south, y east,
z up. The ground plane sits at ``z = -h`` where ``h`` is the camera height.

Overhead canvas: pixel ``(u, v)`` with ``u`` the row and ``v`` the column.
A canvas pixel maps to world ``(x, y) = lambda * (v - v0, u - u0)``, so the
column axis runs south and the row axis runs east.

Camera frame: x right, y down, z forward. Ground images are stored as
``data[row, col]`` with ``col = u_g`` and ``row = v_g``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptySequence, NotInFront

DEPTH_EPS = 1e-6
WEIGHT_EPS = 1e-6
DEFAULT_CAMERA_HEIGHT = 1.65


@dataclass
class FeatureMap:
    """Dense ``H x W x C`` feature grid with a boolean validity mask.

    Masked entries of ``data`` are forced to zero on construction.
    """

    data: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise DimensionMismatch(f"feature data must be HxWxC, got shape {data.shape}")
        if self.mask is None:
            mask = np.ones(data.shape[:2], dtype=bool)
        else:
            mask = np.asarray(self.mask).astype(bool)
        if mask.shape != data.shape[:2]:
            raise DimensionMismatch(f"mask shape {mask.shape} != data spatial shape {data.shape[:2]}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature data contains non-finite values")
        self.data = np.where(mask[:, :, None], data, 0.0)
        self.mask = mask

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def copy(self) -> "FeatureMap":
        return FeatureMap(self.data.copy(), self.mask.copy())

    def __repr__(self):
        return f"FeatureMap(shape={self.data.shape}, valid={int(self.mask.sum())})"


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float = 90.0) -> "CameraIntrinsics":
        """Square-pixel camera with the principal point at the image center."""
        f = 0.5 * width / np.tan(np.radians(hfov_deg) / 2.0)
        return cls(f, f, width / 2.0, height / 2.0, width, height)


@dataclass(frozen=True, eq=False)
class RigidPose:
    """World-to-camera transform ``q = R p + t``."""

    rotation: np.ndarray
    translation: np.ndarray
    timestamp_index: int = 1

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.allclose(R.T @ R, np.eye(3), rtol=0.0, atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @classmethod
    def from_heading(cls, center, heading: float, pitch: float = 0.0, roll: float = 0.0,
                     timestamp_index: int = 1) -> "RigidPose":
        """Build a pose from a compass heading (0 = north, pi/2 = east).

        ``pitch`` tilts the optical axis downward, ``roll`` rotates about it.
        """
        forward = np.array([-np.cos(heading), np.sin(heading), 0.0])
        down = np.array([0.0, 0.0, -1.0])
        f = np.cos(pitch) * forward + np.sin(pitch) * down
        d = np.cos(pitch) * down - np.sin(pitch) * forward
        r = np.cross(d, f)
        r, d = np.cos(roll) * r + np.sin(roll) * d, -np.sin(roll) * r + np.cos(roll) * d
        R = np.stack([r, d, f])
        c = np.asarray(center, dtype=np.float64).reshape(-1)
        if c.size == 2:
            c = np.append(c, 0.0)
        return cls(R, -R @ c, timestamp_index)

    def shifted(self, offset) -> "RigidPose":
        """Same camera expressed in a world frame whose origin moved to ``offset``.

        A point ``p`` in the new frame is ``p + offset`` in the old one.
        """
        o = np.asarray(offset, dtype=np.float64).reshape(-1)
        if o.size == 2:
            o = np.append(o, 0.0)
        return RigidPose(self.rotation, self.translation + self.rotation @ o, self.timestamp_index)


@dataclass(frozen=True)
class CanvasSpec:
    size_px: int
    meters_per_pixel: float = 0.2
    camera_height: float = DEFAULT_CAMERA_HEIGHT
    center_px: tuple = field(default=None)

    def __post_init__(self):
        if self.size_px <= 0 or self.meters_per_pixel <= 0 or self.camera_height <= 0:
            raise ValueError("canvas size, resolution and camera height must be positive")
        if self.center_px is None:
            object.__setattr__(self, "center_px", (self.size_px / 2.0, self.size_px / 2.0))

    @property
    def coverage_m(self) -> float:
        return self.size_px * self.meters_per_pixel


@dataclass
class GroundFrame:
    """One ground-view observation: features plus the camera that produced them."""

    features: FeatureMap
    intrinsics: CameraIntrinsics
    pose: RigidPose


def overhead_pixel_to_world(u, v, canvas: CanvasSpec) -> np.ndarray:
    """Map overhead pixel(s) ``(row u, col v)`` onto the ground plane.

    Returns an array of shape ``(..., 3)``.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    u0, v0 = canvas.center_px
    lam = canvas.meters_per_pixel
    x = lam * (v - v0)
    y = lam * (u - u0)
    z = np.full(np.broadcast(x, y).shape, -canvas.camera_height)
    return np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def _project(points: np.ndarray, intrinsics: CameraIntrinsics, pose: RigidPose):
    q = points @ pose.rotation.T + pose.translation
    w = q[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        ug = intrinsics.fx * q[..., 0] / w + intrinsics.cx
        vg = intrinsics.fy * q[..., 1] / w + intrinsics.cy
    return ug, vg, w


def world_to_ground_pixel(p, intrinsics: CameraIntrinsics, pose: RigidPose):
    """Perspective projection of world point(s) into the ground image.

    Returns ``(u_g, v_g, w)`` where ``w`` is the camera-frame depth. Raises
    :class:`NotInFront` if any point has ``w <= 1e-6``.
    """
    p = np.asarray(p, dtype=np.float64)
    ug, vg, w = _project(p, intrinsics, pose)
    if np.any(w <= DEPTH_EPS):
        raise NotInFront("point at or behind the camera plane")
    if p.ndim == 1:
        return float(ug), float(vg), float(w)
    return ug, vg, w


def ground_pixel_to_overhead(ug, vg, intrinsics: CameraIntrinsics, pose: RigidPose,
                             canvas: CanvasSpec):
    """Analytic inverse of the warp chain: back-project onto the ground plane.

    Returns overhead ``(u, v)``. Raises :class:`NotInFront` when the ray does
    not meet the ground in front of the camera.
    """
    ug = np.asarray(ug, dtype=np.float64)
    vg = np.asarray(vg, dtype=np.float64)
    ray_cam = np.stack(np.broadcast_arrays(
        (ug - intrinsics.cx) / intrinsics.fx, (vg - intrinsics.cy) / intrinsics.fy, np.ones_like(ug)
    ), axis=-1)
    ray = ray_cam @ pose.rotation
    c = pose.center
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (-canvas.camera_height - c[2]) / ray[..., 2]
    # s is also the camera-frame depth since the camera-frame ray has unit z
    if np.any(~(s > DEPTH_EPS)):
        raise NotInFront("ray does not hit the ground plane in front of the camera")
    x = c[0] + s * ray[..., 0]
    y = c[1] + s * ray[..., 1]
    u0, v0 = canvas.center_px
    return y / canvas.meters_per_pixel + u0, x / canvas.meters_per_pixel + v0


def sample_bilinear(data: np.ndarray, mask: np.ndarray, rows: np.ndarray, cols: np.ndarray,
                    interpolation: str = "bilinear"):
    """Sample ``data`` (H x W x C) at fractional, in-bounds positions.

    Masked source pixels contribute nothing; the remaining weights are
    renormalized. Returns ``(values (n, C), valid (n,))``.
    """
    H, W = mask.shape
    if interpolation == "nearest":
        r = np.clip(np.rint(rows).astype(np.intp), 0, H - 1)
        c = np.clip(np.rint(cols).astype(np.intp), 0, W - 1)
        ok = mask[r, c]
        return data[r, c] * ok[:, None], ok
    if interpolation != "bilinear":
        raise ValueError(f"unknown interpolation {interpolation!r}")
    r0 = np.clip(np.floor(rows).astype(np.intp), 0, H - 1)
    c0 = np.clip(np.floor(cols).astype(np.intp), 0, W - 1)
    r1 = np.minimum(r0 + 1, H - 1)
    c1 = np.minimum(c0 + 1, W - 1)
    fr = rows - r0
    fc = cols - c0
    acc = np.zeros((rows.shape[0], data.shape[2]))
    total = np.zeros(rows.shape[0])
    for rr, cc, wgt in (
        (r0, c0, (1 - fr) * (1 - fc)),
        (r0, c1, (1 - fr) * fc),
        (r1, c0, fr * (1 - fc)),
        (r1, c1, fr * fc),
    ):
        wgt = wgt * mask[rr, cc]
        acc += wgt[:, None] * data[rr, cc]
        total += wgt
    ok = total >= WEIGHT_EPS
    out = np.zeros_like(acc)
    out[ok] = acc[ok] / total[ok, None]
    return out, ok


def _landing_points(intrinsics, pose, canvas):
    S = canvas.size_px
    uu, vv = np.meshgrid(np.arange(S), np.arange(S), indexing="ij")
    ug, vg, w = _project(overhead_pixel_to_world(uu, vv, canvas), intrinsics, pose)
    inside = (w > DEPTH_EPS) & (ug >= 0) & (ug <= intrinsics.width - 1) \
        & (vg >= 0) & (vg <= intrinsics.height - 1)
    return ug, vg, inside


def visibility_mask(intrinsics: CameraIntrinsics, pose: RigidPose, canvas: CanvasSpec) -> np.ndarray:
    """Canvas pixels whose ground point projects in front of and inside the image."""
    return _landing_points(intrinsics, pose, canvas)[2]


def gvp_warp(source: FeatureMap, intrinsics: CameraIntrinsics, pose: RigidPose,
             canvas: CanvasSpec, interpolation: str = "bilinear") -> FeatureMap:
    """Warp a ground-view feature map onto the overhead canvas (inverse mapping)."""
    if (source.height, source.width) != (intrinsics.height, intrinsics.width):
        raise DimensionMismatch(
            f"source is {source.height}x{source.width}, intrinsics expect "
            f"{intrinsics.height}x{intrinsics.width}"
        )
    S = canvas.size_px
    ug, vg, inside = _landing_points(intrinsics, pose, canvas)
    out = np.zeros((S, S, source.channels))
    mask = np.zeros((S, S), dtype=bool)
    idx = np.nonzero(inside)
    if idx[0].size:
        vals, ok = sample_bilinear(source.data, source.mask, vg[idx], ug[idx], interpolation)
        out[idx] = vals
        mask[idx] = ok
    return FeatureMap(out, mask)


def gvp_warp_sequence(sources: Sequence[FeatureMap], intrinsics, poses: Sequence[RigidPose],
                      canvas: CanvasSpec, interpolation: str = "bilinear") -> list:
    """Warp every frame of a sequence onto one shared canvas.

    ``intrinsics`` is either one :class:`CameraIntrinsics` shared by all
    frames or a per-frame list. Poses must be expressed in the world frame
    anchored at the last frame's camera location.
    """
    if len(sources) == 0:
        raise EmptySequence("cannot project an empty sequence")
    if isinstance(intrinsics, CameraIntrinsics):
        intrinsics = [intrinsics] * len(sources)
    if not (len(sources) == len(intrinsics) == len(poses)):
        raise DimensionMismatch("sources, intrinsics and poses must have equal length")
    return [gvp_warp(f, k, p, canvas, interpolation) for f, k, p in zip(sources, intrinsics, poses)]
