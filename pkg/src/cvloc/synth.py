"""Synthetic planar worlds rendered from the ground and from above.

The renderers here are forward models written independently of the warp in
:mod:`cvloc.geometry`: the overhead renderer samples the texture directly,
and the ground renderer casts one ray per pixel onto the ground plane. They
serve as the ground truth the warp is checked against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .evaluation import GeoPoint, offset_geopoint
from .geometry import (
    DEFAULT_CAMERA_HEIGHT,
    DEPTH_EPS,
    CameraIntrinsics,
    CanvasSpec,
    FeatureMap,
    RigidPose,
)


def _periodic_upsample(lattice: np.ndarray, size: int) -> np.ndarray:
    """Smoothstep interpolation of a wrapping L x L lattice onto size x size."""
    L = lattice.shape[0]
    pos = (np.arange(size) + 0.5) * L / size
    i0 = np.floor(pos).astype(np.intp) % L
    i1 = (i0 + 1) % L
    t = pos - np.floor(pos)
    t = t * t * (3.0 - 2.0 * t)
    rows = lattice[i0] * (1 - t)[:, None] + lattice[i1] * t[:, None]
    return rows[:, i0] * (1 - t)[None, :] + rows[:, i1] * t[None, :]


def value_noise(size: int, seed: int, base_cells: int = 8, octaves: int = 4,
                persistence: float = 0.5) -> np.ndarray:
    """Tileable multi-octave value noise scaled to [0, 1]."""
    rng = np.random.default_rng(seed)
    tex = np.zeros((size, size))
    amp = 1.0
    for k in range(octaves):
        cells = min(base_cells * 2 ** k, size)
        tex += amp * _periodic_upsample(rng.random((cells, cells)), size)
        amp *= persistence
    lo, hi = tex.min(), tex.max()
    return (tex - lo) / (hi - lo) if hi > lo else np.zeros_like(tex)


@dataclass
class Scene:
    """A textured ground plane centered on world (0, 0), tiling periodically."""

    texture: np.ndarray
    extent_m: float
    seed: int = 0
    origin: GeoPoint = field(default_factory=lambda: GeoPoint(49.0, 8.4))

    @property
    def texel_m(self) -> float:
        return self.extent_m / self.texture.shape[0]

    def sample(self, x, y) -> np.ndarray:
        """Bilinear texture lookup at world ``(x south, y east)`` meters."""
        T = self.texture.shape[0]
        r = (np.asarray(x, dtype=np.float64) + 0.5 * self.extent_m) / self.texel_m - 0.5
        c = (np.asarray(y, dtype=np.float64) + 0.5 * self.extent_m) / self.texel_m - 0.5
        r0 = np.floor(r)
        c0 = np.floor(c)
        fr, fc = r - r0, c - c0
        r0 = r0.astype(np.intp) % T
        c0 = c0.astype(np.intp) % T
        r1, c1 = (r0 + 1) % T, (c0 + 1) % T
        tex = self.texture
        return ((1 - fr) * (1 - fc) * tex[r0, c0] + (1 - fr) * fc * tex[r0, c1]
                + fr * (1 - fc) * tex[r1, c0] + fr * fc * tex[r1, c1])

    def to_geo(self, x: float, y: float) -> GeoPoint:
        return offset_geopoint(self.origin, x, y)


def make_scene(seed: int, extent_m: float = 400.0, texture_size: int = 1024, kind: str = "noise",
               cell_m: float = 1.0, base_cells: int = 16, octaves: int = 4,
               origin: GeoPoint = None) -> Scene:
    """Deterministic procedural ground texture.

    ``kind="noise"`` gives value noise; ``kind="checker"`` a checkerboard with
    ``cell_m`` meter squares (aliases badly under correlation, tests only).
    """
    if extent_m <= 0 or texture_size < 2:
        raise ValueError("extent must be positive and texture at least 2x2")
    if kind == "noise":
        tex = value_noise(texture_size, seed, base_cells, octaves)
    elif kind == "checker":
        centers = (np.arange(texture_size) + 0.5) * extent_m / texture_size - 0.5 * extent_m
        k = np.floor(centers / cell_m).astype(np.int64)
        tex = ((k[:, None] + k[None, :]) % 2).astype(np.float64)
    else:
        raise ValueError(f"unknown texture kind {kind!r}")
    return Scene(tex, float(extent_m), seed, origin or GeoPoint(49.0, 8.4))


def render_satellite(scene: Scene, canvas: CanvasSpec, center_world=(0.0, 0.0)) -> FeatureMap:
    """Orthographic overhead render centered on ``center_world`` (x, y) meters."""
    S = canvas.size_px
    u0, v0 = canvas.center_px
    lam = canvas.meters_per_pixel
    u, v = np.meshgrid(np.arange(S, dtype=np.float64), np.arange(S, dtype=np.float64), indexing="ij")
    x = center_world[0] + lam * (v - v0)
    y = center_world[1] + lam * (u - u0)
    return FeatureMap(scene.sample(x, y)[:, :, None])


def render_ground(scene: Scene, intrinsics: CameraIntrinsics, pose: RigidPose,
                  camera_height: float = DEFAULT_CAMERA_HEIGHT) -> FeatureMap:
    """Ray-cast render onto the plane ``z = -camera_height``; sky pixels are masked."""
    c = pose.center
    if not c[2] > -camera_height:
        raise ValueError("camera must be above the ground plane")
    H, W = intrinsics.height, intrinsics.width
    col, row = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    # camera-frame ray with unit z: its parameter along the ray equals depth
    d_cam = np.stack([(col - intrinsics.cx) / intrinsics.fx, (row - intrinsics.cy) / intrinsics.fy,
                      np.ones_like(col)], axis=-1)
    d_world = d_cam @ pose.rotation
    dz = d_world[..., 2]
    hit = dz < 0
    depth = np.full(dz.shape, -1.0)
    depth[hit] = (-camera_height - c[2]) / dz[hit]
    hit &= depth > DEPTH_EPS
    x = c[0] + depth * d_world[..., 0]
    y = c[1] + depth * d_world[..., 1]
    vals = np.where(hit, scene.sample(np.where(hit, x, 0.0), np.where(hit, y, 0.0)), 0.0)
    return FeatureMap(vals[:, :, None], hit)


@dataclass
class Trajectory:
    poses: list
    spacing: float
    headings: list

    @property
    def centers(self) -> np.ndarray:
        return np.array([p.center for p in self.poses])


def make_trajectory(n_frames: int, spacing_m: float, heading_rad: float = 0.0,
                    pitch: float = 0.0) -> Trajectory:
    """Straight constant-heading drive ending at the world origin.

    Frame ``i`` (1-based) sits ``(n_frames - i) * spacing_m`` meters behind
    the origin along the heading.
    """
    if n_frames < 1:
        raise ValueError("need at least one frame")
    if spacing_m <= 0:
        raise ValueError("spacing must be positive")
    forward = np.array([-np.cos(heading_rad), np.sin(heading_rad), 0.0])
    poses = [
        RigidPose.from_heading(-(n_frames - i) * spacing_m * forward, heading_rad, pitch,
                               timestamp_index=i)
        for i in range(1, n_frames + 1)
    ]
    return Trajectory(poses, float(spacing_m), [float(heading_rad)] * n_frames)


def render_sequence(scene: Scene, intrinsics: CameraIntrinsics, trajectory: Trajectory,
                    location=(0.0, 0.0), camera_height: float = DEFAULT_CAMERA_HEIGHT) -> list:
    """Ground renders of a trajectory whose last camera sits at ``location``.

    The trajectory poses are query-anchored; rendering re-expresses them in
    scene coordinates.
    """
    return [render_ground(scene, intrinsics, p.shifted([-location[0], -location[1]]), camera_height)
            for p in trajectory.poses]


def stack_channels(maps) -> FeatureMap:
    """Concatenate single-channel maps into one multi-channel map (masks ANDed)."""
    data = np.concatenate([m.data for m in maps], axis=2)
    mask = np.logical_and.reduce([m.mask for m in maps])
    return FeatureMap(data, mask)
