"""Depth image back-projection into a colored 3D point cloud.

Pixels (x, y) with depth w map to camera-frame coordinates through the
projection matrix terms (fx, fy, cx, cy, Tx, Ty): with the intermediates
u = x*w and v = y*w,

    X = (u - cx*w - Tx) / fx
    Y = (v - cy*w - Ty) / fy
    Z = w

Depth is meters as 32-bit float; w = 0 marks an invalid pixel and emits
no point. Points serialize to 16 bytes each: X, Y, Z as little-endian
float32 plus a packed RGBA byte quad.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, MissingCalibration

POINT_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("rgba", "<u4")])
POINT_SIZE = POINT_DTYPE.itemsize  # 16

CAMERA_FRAME = "camera"
BASE_FRAME = "base"


@dataclass(frozen=True)
class ProjectionMatrix:
    """Camera intrinsics: focal lengths, principal point, stereo baseline terms."""

    fx: float
    fy: float
    cx: float
    cy: float
    tx: float = 0.0
    ty: float = 0.0

    def validate(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise MissingCalibration(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        for name in ("fx", "fy", "cx", "cy", "tx", "ty"):
            if not math.isfinite(getattr(self, name)):
                raise MissingCalibration(f"calibration field {name} is not finite")


@dataclass
class PointCloud:
    """Back-projected points with packed color. xyz is (N, 3) float32;
    rgba is (N,) uint32 with byte order [r, g, b, a]."""

    xyz: np.ndarray
    rgba: np.ndarray
    frame: str = CAMERA_FRAME

    def __post_init__(self):
        self.xyz = np.ascontiguousarray(self.xyz, dtype=np.float32).reshape(-1, 3)
        self.rgba = np.ascontiguousarray(self.rgba, dtype=np.uint32).reshape(-1)
        if self.xyz.shape[0] != self.rgba.shape[0]:
            raise DimensionMismatch("xyz and rgba must have the same point count")

    @property
    def count(self) -> int:
        return self.xyz.shape[0]

    def colors(self) -> np.ndarray:
        """(N, 4) uint8 view of the packed colors."""
        return self.rgba.view(np.uint8).reshape(-1, 4)

    def to_records(self) -> np.ndarray:
        rec = np.empty(self.count, dtype=POINT_DTYPE)
        rec["x"] = self.xyz[:, 0]
        rec["y"] = self.xyz[:, 1]
        rec["z"] = self.xyz[:, 2]
        rec["rgba"] = self.rgba
        return rec

    def to_bytes(self) -> bytes:
        """Serialize to exactly 16 bytes per point."""
        return self.to_records().tobytes()

    @classmethod
    def from_records(cls, rec: np.ndarray, frame: str = CAMERA_FRAME) -> "PointCloud":
        xyz = np.empty((rec.shape[0], 3), dtype=np.float32)
        xyz[:, 0] = rec["x"]
        xyz[:, 1] = rec["y"]
        xyz[:, 2] = rec["z"]
        return cls(xyz=xyz, rgba=np.array(rec["rgba"], dtype=np.uint32), frame=frame)

    @classmethod
    def from_bytes(cls, data, frame: str = CAMERA_FRAME) -> "PointCloud":
        rec = np.frombuffer(data, dtype=POINT_DTYPE)
        return cls.from_records(rec, frame=frame)


def pack_rgba(colors: np.ndarray) -> np.ndarray:
    """(N, 3) or (N, 4) uint8 colors -> (N,) packed uint32, byte order r,g,b,a."""
    colors = np.asarray(colors, dtype=np.uint8)
    if colors.ndim != 2 or colors.shape[1] not in (3, 4):
        raise DimensionMismatch("colors must be (N, 3) or (N, 4) uint8")
    quad = np.empty((colors.shape[0], 4), dtype=np.uint8)
    quad[:, :3] = colors[:, :3]
    quad[:, 3] = colors[:, 3] if colors.shape[1] == 4 else 255
    return quad.reshape(-1).view(np.uint32).copy()


def backproject_pixel(p: ProjectionMatrix, x: float, y: float, w: float) -> tuple[float, float, float]:
    """Map one pixel plus depth to camera-frame coordinates."""
    u = x * w
    v = y * w
    X = (u - p.cx * w - p.tx) / p.fx
    Y = (v - p.cy * w - p.ty) / p.fy
    Z = w
    return (X, Y, Z)


def generate_pointcloud(p: ProjectionMatrix, depth: np.ndarray, color: np.ndarray) -> PointCloud:
    """Back-project every valid pixel of a depth image, merging per-pixel color.

    depth: (h, w) float32 meters, 0 = invalid; color: (h, w, 3) uint8.
    Pixels are independent, so any evaluation order yields the same points;
    this implementation emits them in row-major order.
    """
    depth = np.asarray(depth)
    color = np.asarray(color)
    if depth.ndim != 2 or color.shape[:2] != depth.shape:
        raise DimensionMismatch(
            f"depth {depth.shape} and color {color.shape[:2] if color.ndim >= 2 else color.shape} must match")
    mask = depth > 0
    rows, cols = np.nonzero(mask)
    w = depth[rows, cols].astype(np.float64)
    u = cols * w
    v = rows * w
    xyz = np.empty((rows.shape[0], 3), dtype=np.float32)
    xyz[:, 0] = (u - p.cx * w - p.tx) / p.fx
    xyz[:, 1] = (v - p.cy * w - p.ty) / p.fy
    xyz[:, 2] = depth[rows, cols]
    return PointCloud(xyz=xyz, rgba=pack_rgba(color[rows, cols]), frame=CAMERA_FRAME)


_camera_info_cache: dict[str, ProjectionMatrix] = {}


def fetch_camera_info(source: str | Path) -> ProjectionMatrix:
    """Read the projection matrix from a JSON config, once per process.

    The matrix is cached per path for the pipeline's lifetime; the file is
    re-read only after restart (or clear_camera_info_cache in tests).
    Accepts either a bare {fx,fy,cx,cy,tx,ty} object or a config file with
    a "calibration" section.
    """
    key = str(Path(source).resolve())
    cached = _camera_info_cache.get(key)
    if cached is not None:
        return cached
    try:
        with open(source) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise MissingCalibration(f"cannot read calibration from {source}: {exc}") from exc
    cal = raw.get("calibration", raw)
    try:
        matrix = ProjectionMatrix(
            fx=float(cal["fx"]), fy=float(cal["fy"]),
            cx=float(cal["cx"]), cy=float(cal["cy"]),
            tx=float(cal.get("tx", 0.0)), ty=float(cal.get("ty", 0.0)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise MissingCalibration(f"calibration fields missing or invalid in {source}") from exc
    matrix.validate()
    _camera_info_cache[key] = matrix
    return matrix


def clear_camera_info_cache() -> None:
    _camera_info_cache.clear()
