"""Obstacle-grid detection: transform the cloud into the car's base frame,
keep the points inside a fixed volume in front of the car, project them to
the ground plane, and count them per grid cell.

The default 13x18 grid of 0.25 m cells serializes to 234 bytes. Cell
counts saturate at 255; intervals are half-open on every axis so boundary
points are counted exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ObstacleConfig
from .errors import FrameMismatch, InvalidSpec
from .pointcloud import BASE_FRAME, PointCloud

SATURATION = 255


@dataclass(frozen=True)
class RigidTransform:
    """Rotation plus translation; rotation must be orthonormal with det +1."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise InvalidSpec("rotation must be orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise InvalidSpec("rotation must have determinant +1 within 1e-9")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class ObstacleBox:
    """Volume in front of the car, base frame; min < max on every axis."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max and self.z_min < self.z_max):
            raise InvalidSpec("obstacle box must satisfy min < max on every axis")

    @classmethod
    def from_config(cls, cfg: ObstacleConfig) -> "ObstacleBox":
        return cls(cfg.x_min, cfg.x_max, cfg.y_min, cfg.y_max, cfg.z_min, cfg.z_max)


@dataclass
class ObstacleGrid:
    """Ground-plane discretization: counts[r, c] points per cell, saturating."""

    rows: int
    cols: int
    cell_size: float
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.ascontiguousarray(self.counts, dtype=np.uint8).reshape(self.rows, self.cols)

    def to_bytes(self) -> bytes:
        """Serialize to exactly rows * cols bytes."""
        return self.counts.tobytes()

    @classmethod
    def from_bytes(cls, data, rows: int, cols: int, cell_size: float) -> "ObstacleGrid":
        counts = np.frombuffer(data, dtype=np.uint8, count=rows * cols).reshape(rows, cols)
        return cls(rows=rows, cols=cols, cell_size=cell_size, counts=counts.copy())


def transform_cloud(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    """Map a camera-frame cloud into the car's base frame: p' = R p + t."""
    if cloud.frame == BASE_FRAME:
        raise FrameMismatch("cloud is already in the base frame")
    xyz = t.apply(cloud.xyz).astype(np.float32)
    return PointCloud(xyz=xyz, rgba=cloud.rgba.copy(), frame=BASE_FRAME)


def filter_box(cloud: PointCloud, box: ObstacleBox) -> PointCloud:
    """Keep exactly the points with coordinates in [min, max) on every axis."""
    xyz = cloud.xyz
    keep = (
        (xyz[:, 0] >= box.x_min) & (xyz[:, 0] < box.x_max)
        & (xyz[:, 1] >= box.y_min) & (xyz[:, 1] < box.y_max)
        & (xyz[:, 2] >= box.z_min) & (xyz[:, 2] < box.z_max)
    )
    return PointCloud(xyz=xyz[keep], rgba=cloud.rgba[keep], frame=cloud.frame)


def rasterize_grid(cloud: PointCloud, box: ObstacleBox, rows: int, cols: int) -> ObstacleGrid:
    """Project box-filtered points to the ground plane and count per cell.

    cell(r, c) counts points with r = floor((x - x_min) / cell_x) and
    c = floor((y - y_min) / cell_y); z is ignored. Counts saturate at 255.
    """
    if rows <= 0 or cols <= 0:
        raise InvalidSpec("grid dimensions must be positive")
    cell_x = (box.x_max - box.x_min) / rows
    cell_y = (box.y_max - box.y_min) / cols
    xyz = cloud.xyz.astype(np.float64)
    r = np.floor((xyz[:, 0] - box.x_min) / cell_x).astype(np.int64)
    c = np.floor((xyz[:, 1] - box.y_min) / cell_y).astype(np.int64)
    # guards against float rounding at the upper box edge of pre-filtered input
    inside = (r >= 0) & (r < rows) & (c >= 0) & (c < cols)
    acc = np.zeros((rows, cols), dtype=np.int64)
    np.add.at(acc, (r[inside], c[inside]), 1)
    counts = np.minimum(acc, SATURATION).astype(np.uint8)
    return ObstacleGrid(rows=rows, cols=cols, cell_size=cell_x, counts=counts)


def obstacle_in_path(grid: ObstacleGrid, footprint_cols: range, min_count: int = 3) -> bool:
    """True when any cell in the footprint columns reaches min_count points.

    The driving loop maps True to a commanded speed of 0 (stop).
    """
    lo, hi = footprint_cols.start, footprint_cols.stop
    if not (0 <= lo <= hi <= grid.cols):
        raise InvalidSpec(f"footprint columns [{lo}, {hi}) outside grid columns [0, {grid.cols})")
    if footprint_cols.step != 1:
        return bool(np.any(grid.counts[:, list(footprint_cols)] >= min_count))
    return bool(np.any(grid.counts[:, lo:hi] >= min_count))
