"""On-disk formats: tensors, conv weights, manifests, camera files, config, PGM.

Tensor file layout (all little-endian)::

    b"CVLT" | u32 version=1 | u32 ndim | ndim x u32 dims | float32 payload

The payload is row-major with the last dimension fastest. A feature map's
mask lives next to it as ``<path>.mask`` in the same format (values 0/1).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CVLError, DimensionMismatch
from .evaluation import GeoPoint
from .fusion import ConvStack
from .geometry import CameraIntrinsics, FeatureMap, RigidPose

MAGIC = b"CVLT"
VERSION = 1
_U32 = struct.Struct("<I")


class TensorFormatError(CVLError):
    pass


def write_tensor(path, array) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"refusing to write non-finite values to {path}")
    header = MAGIC + _U32.pack(VERSION) + _U32.pack(arr.ndim)
    header += b"".join(_U32.pack(d) for d in arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise TensorFormatError(f"{path}: truncated header")
    version, ndim = _U32.unpack_from(raw, 4)[0], _U32.unpack_from(raw, 8)[0]
    if version != VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    offset = 12 + 4 * ndim
    if len(raw) < offset:
        raise TensorFormatError(f"{path}: truncated header")
    dims = tuple(_U32.unpack_from(raw, 12 + 4 * i)[0] for i in range(ndim))
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - offset != 4 * count:
        raise TensorFormatError(f"{path}: payload is {len(raw) - offset} bytes, expected {4 * count}")
    arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(dims)
    if not np.all(np.isfinite(arr)):
        raise TensorFormatError(f"{path}: non-finite values")
    return arr.astype(np.float32)


def mask_path(path) -> Path:
    return Path(str(path) + ".mask")


def write_feature_map(path, fmap: FeatureMap) -> None:
    write_tensor(path, fmap.data)
    write_tensor(mask_path(path), fmap.mask.astype(np.float32))


def read_feature_map(path) -> FeatureMap:
    data = read_tensor(path)
    if data.ndim == 2:
        data = data[:, :, None]
    mpath = mask_path(path)
    mask = read_tensor(mpath) > 0.5 if mpath.exists() else None
    return FeatureMap(data.astype(np.float64), mask)


def write_conv_stack(path, stack: ConvStack) -> None:
    """Weights as dims [2, 3, 3, C_in, C_out] plus ``<path>.bias`` as [2, C_out].

    Layer 2 (C_out -> C_out) is stored in the first C_out input rows of slot
    1, the remaining rows are zero. Requires C_in >= C_out.
    """
    cin, cout = stack.in_channels, stack.out_channels
    if stack.weight1.shape[3] != cout or cin < cout:
        raise DimensionMismatch("file format needs hidden width == C_out and C_in >= C_out")
    w = np.zeros((2, 3, 3, cin, cout))
    w[0] = stack.weight1
    w[1, :, :, :cout] = stack.weight2
    write_tensor(path, w)
    write_tensor(Path(str(path) + ".bias"), np.stack([stack.bias1, stack.bias2]))


def read_conv_stack(path) -> ConvStack:
    w = read_tensor(path).astype(np.float64)
    b = read_tensor(Path(str(path) + ".bias")).astype(np.float64)
    if w.ndim != 5 or w.shape[:3] != (2, 3, 3):
        raise DimensionMismatch(f"{path}: weight dims must be [2, 3, 3, C_in, C_out], got {list(w.shape)}")
    cin, cout = w.shape[3], w.shape[4]
    if cin < cout or b.shape != (2, cout):
        raise DimensionMismatch(f"{path}: inconsistent weight/bias shapes {w.shape} / {b.shape}")
    return ConvStack(w[0], b[0], w[1, :, :, :cout], b[1])


def _num(x) -> str:
    """Shortest round-tripping text for a float, numpy scalars included."""
    return repr(float(x))


def _data_lines(path):
    with open(path, encoding="utf-8", newline="") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                yield line


@dataclass
class ManifestEntry:
    id: str
    path: Path
    position: GeoPoint


def read_manifest(path) -> list:
    """Records ``id,tensor_path,lat,lon``; relative paths resolve against the manifest."""
    base = Path(path).parent
    entries, seen = [], set()
    for row in csv.reader(_data_lines(path)):
        if len(row) != 4:
            raise CVLError(f"{path}: expected 4 fields, got {row}")
        ident, tpath, lat, lon = (f.strip() for f in row)
        if ident in seen:
            raise CVLError(f"{path}: duplicate id {ident!r}")
        seen.add(ident)
        p = Path(tpath)
        entries.append(ManifestEntry(ident, p if p.is_absolute() else base / p,
                                     GeoPoint(float(lat), float(lon))))
    return entries


def write_manifest(path, entries) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("# id,tensor_path,lat,lon\n")
        for e in entries:
            fh.write(f"{e.id},{e.path},{_num(e.position.lat)},{_num(e.position.lon)}\n")


def read_positions(path) -> dict:
    """``query_id,lat,lon`` records."""
    out = {}
    for row in csv.reader(_data_lines(path)):
        if row[0] == "query_id":
            continue
        out[row[0]] = GeoPoint(float(row[1]), float(row[2]))
    return out


def write_positions(path, positions: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("query_id,lat,lon\n")
        for qid, p in positions.items():
            fh.write(f"{qid},{_num(p.lat)},{_num(p.lon)}\n")


POSE_HEADER = ["frame"] + [f"r{i}{j}" for i in range(3) for j in range(3)] + ["tx", "ty", "tz"]
INTRINSICS_HEADER = ["frame", "fx", "fy", "cx", "cy", "width", "height"]


def write_poses(path, poses) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(POSE_HEADER) + "\n")
        for p in poses:
            vals = list(p.rotation.ravel()) + list(p.translation)
            fh.write(",".join([str(p.timestamp_index)] + [_num(v) for v in vals]) + "\n")


def read_poses(path) -> list:
    poses = []
    for row in csv.reader(_data_lines(path)):
        if row[0] == "frame":
            continue
        vals = [float(v) for v in row[1:]]
        poses.append(RigidPose(np.array(vals[:9]).reshape(3, 3), vals[9:12], int(row[0])))
    return poses


def write_intrinsics(path, intrinsics) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(INTRINSICS_HEADER) + "\n")
        for i, k in enumerate(intrinsics, start=1):
            fh.write(f"{i},{_num(k.fx)},{_num(k.fy)},{_num(k.cx)},{_num(k.cy)},{k.width},{k.height}\n")


def read_intrinsics(path) -> list:
    out = []
    for row in csv.reader(_data_lines(path)):
        if row[0] == "frame":
            continue
        fx, fy, cx, cy = (float(v) for v in row[1:5])
        out.append(CameraIntrinsics(fx, fy, cx, cy, int(row[5]), int(row[6])))
    return out


DEFAULT_CONFIG = {
    "canvas.size_px": 512,
    "canvas.meters_per_pixel": 0.2,
    "canvas.camera_height": 1.65,
    "ground.height": 256,
    "ground.width": 1024,
    "ground.hfov_deg": 90.0,
    "match.radius_px": None,
    "fusion.mode": "pcsf",
    "eval.threshold_m": 10.0,
    "scene.extent_m": 400.0,
    "scene.texture_size": 1024,
    "seed": 0,
}


def _coerce(text: str):
    text = text.strip()
    if text.lower() in ("none", ""):
        return None
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def parse_config_lines(lines) -> dict:
    cfg = {}
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CVLError(f"config line without '=': {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in DEFAULT_CONFIG:
            raise CVLError(f"unknown config key {key!r}")
        cfg[key] = _coerce(value)
    return cfg


def load_config(path=None, overrides=None) -> dict:
    """Defaults, then the key=value file, then ``overrides`` (CLI flags)."""
    cfg = dict(DEFAULT_CONFIG)
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cfg.update(parse_config_lines(fh))
    if overrides:
        cfg.update(parse_config_lines(overrides))
    return cfg


def write_pgm(path, image) -> None:
    """8-bit binary PGM from an array of [0, 1] intensities."""
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM into [0, 1] floats."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise TensorFormatError(f"{path}: only 8-bit binary PGM is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1)
    return data.reshape(h, w).astype(np.float64) / 255.0

