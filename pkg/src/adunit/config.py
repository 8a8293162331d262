"""Application configuration: one JSON file covering calibration, obstacle
grid geometry, lane thresholds, and transport sizing.

Schema (all keys optional, defaults below):

    {
      "calibration": {"fx","fy","cx","cy","tx","ty"},
      "image":       {"width","height"},
      "cam_to_base": {"rotation": 3x3, "translation": [x,y,z]},
      "obstacle":    {"box": {"x":[min,max],"y":[min,max],"z":[min,max]},
                      "rows","cols","min_count","footprint_cols":[lo,hi)},
      "lane":        {"thresholds": {"white":{"s_max","v_min"},
                                     "yellow":{"h_min","h_max","s_min","v_min"}},
                      "homography": 3x3, "shift", "scale"},
      "transport":   {"pool_capacity","queue_depth"}
    }
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidSpec, MissingCalibration

IDENTITY3 = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

# Optical camera frame to car base frame: camera z (depth) points along base x
# (forward), camera x points along -y (right), camera y along -z (down).
DEFAULT_CAM_ROTATION = ((0.0, 0.0, 1.0), (-1.0, 0.0, 0.0), (0.0, -1.0, 0.0))
DEFAULT_CAM_TRANSLATION = (0.0, 0.0, 0.2)


@dataclass(frozen=True)
class CalibrationConfig:
    fx: float = 554.3
    fy: float = 554.3
    cx: float = 320.0
    cy: float = 240.0
    tx: float = 0.0
    ty: float = 0.0

    def validate(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise MissingCalibration(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        for name in ("fx", "fy", "cx", "cy", "tx", "ty"):
            if not math.isfinite(getattr(self, name)):
                raise MissingCalibration(f"calibration field {name} is not finite")


@dataclass(frozen=True)
class ObstacleConfig:
    x_min: float = 0.0
    x_max: float = 3.25
    y_min: float = -2.25
    y_max: float = 2.25
    z_min: float = 0.05
    z_max: float = 0.5
    rows: int = 13
    cols: int = 18
    min_count: int = 3
    footprint_lo: int = 7
    footprint_hi: int = 11

    def validate(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max and self.z_min < self.z_max):
            raise InvalidSpec("obstacle box must satisfy min < max on every axis")
        if self.rows <= 0 or self.cols <= 0:
            raise InvalidSpec("grid dimensions must be positive")
        if not (0 <= self.footprint_lo < self.footprint_hi <= self.cols):
            raise InvalidSpec("footprint column range must lie within [0, cols)")

    @property
    def footprint_cols(self) -> range:
        return range(self.footprint_lo, self.footprint_hi)


@dataclass(frozen=True)
class LaneThresholds:
    white_s_max: int = 60
    white_v_min: int = 200
    yellow_h_min: int = 20
    yellow_h_max: int = 35
    yellow_s_min: int = 80
    yellow_v_min: int = 80

    def validate(self) -> None:
        if self.yellow_h_min > self.yellow_h_max:
            raise InvalidSpec("yellow hue range must satisfy h_min <= h_max")
        if not (0 <= self.yellow_h_min < 180 and 0 <= self.yellow_h_max < 180):
            raise InvalidSpec("hue thresholds must lie in [0, 180)")
        for v in (self.white_s_max, self.white_v_min, self.yellow_s_min, self.yellow_v_min):
            if not 0 <= v < 256:
                raise InvalidSpec("saturation/value thresholds must lie in [0, 256)")


@dataclass(frozen=True)
class LaneConfig:
    thresholds: LaneThresholds = field(default_factory=LaneThresholds)
    homography: tuple = IDENTITY3
    shift: float = 320.0
    scale: float = 0.005

    def validate(self) -> None:
        self.thresholds.validate()
        if self.scale <= 0:
            raise InvalidSpec("meters-per-pixel scale must be positive")


@dataclass(frozen=True)
class TransportConfig:
    pool_capacity: int = 24
    queue_depth: int = 8

    def validate(self) -> None:
        if self.pool_capacity <= 0 or self.queue_depth <= 0:
            raise InvalidSpec("transport pool_capacity and queue_depth must be positive")


@dataclass(frozen=True)
class AppConfig:
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    image_width: int = 640
    image_height: int = 480
    cam_rotation: tuple = DEFAULT_CAM_ROTATION
    cam_translation: tuple = DEFAULT_CAM_TRANSLATION
    obstacle: ObstacleConfig = field(default_factory=ObstacleConfig)
    lane: LaneConfig = field(default_factory=LaneConfig)
    transport: TransportConfig = field(default_factory=TransportConfig)

    def validate(self) -> None:
        self.calibration.validate()
        self.obstacle.validate()
        self.lane.validate()
        self.transport.validate()
        if self.image_width <= 0 or self.image_height <= 0:
            raise InvalidSpec("image dimensions must be positive")


def _matrix3(raw, what: str) -> tuple:
    try:
        rows = tuple(tuple(float(v) for v in row) for row in raw)
    except (TypeError, ValueError) as exc:
        raise InvalidSpec(f"{what} must be a 3x3 number matrix") from exc
    if len(rows) != 3 or any(len(r) != 3 for r in rows):
        raise InvalidSpec(f"{what} must be a 3x3 matrix")
    return rows


def config_from_dict(raw: dict) -> AppConfig:
    """Build an AppConfig from a (possibly partial) JSON-style dict."""
    cal = raw.get("calibration", {})
    image = raw.get("image", {})
    c2b = raw.get("cam_to_base", {})
    obs = raw.get("obstacle", {})
    box = obs.get("box", {})
    lane = raw.get("lane", {})
    thr = lane.get("thresholds", {})
    white = thr.get("white", {})
    yellow = thr.get("yellow", {})
    tp = raw.get("transport", {})

    defaults = AppConfig()
    d_obs = defaults.obstacle
    d_thr = defaults.lane.thresholds
    d_lane = defaults.lane
    d_tp = defaults.transport
    d_cal = defaults.calibration

    cfg = AppConfig(
        calibration=CalibrationConfig(
            fx=float(cal.get("fx", d_cal.fx)),
            fy=float(cal.get("fy", d_cal.fy)),
            cx=float(cal.get("cx", d_cal.cx)),
            cy=float(cal.get("cy", d_cal.cy)),
            tx=float(cal.get("tx", d_cal.tx)),
            ty=float(cal.get("ty", d_cal.ty)),
        ),
        image_width=int(image.get("width", defaults.image_width)),
        image_height=int(image.get("height", defaults.image_height)),
        cam_rotation=_matrix3(c2b.get("rotation", defaults.cam_rotation), "cam_to_base.rotation"),
        cam_translation=tuple(float(v) for v in c2b.get("translation", defaults.cam_translation)),
        obstacle=ObstacleConfig(
            x_min=float(box.get("x", (d_obs.x_min, d_obs.x_max))[0]),
            x_max=float(box.get("x", (d_obs.x_min, d_obs.x_max))[1]),
            y_min=float(box.get("y", (d_obs.y_min, d_obs.y_max))[0]),
            y_max=float(box.get("y", (d_obs.y_min, d_obs.y_max))[1]),
            z_min=float(box.get("z", (d_obs.z_min, d_obs.z_max))[0]),
            z_max=float(box.get("z", (d_obs.z_min, d_obs.z_max))[1]),
            rows=int(obs.get("rows", d_obs.rows)),
            cols=int(obs.get("cols", d_obs.cols)),
            min_count=int(obs.get("min_count", d_obs.min_count)),
            footprint_lo=int(obs.get("footprint_cols", (d_obs.footprint_lo, d_obs.footprint_hi))[0]),
            footprint_hi=int(obs.get("footprint_cols", (d_obs.footprint_lo, d_obs.footprint_hi))[1]),
        ),
        lane=LaneConfig(
            thresholds=LaneThresholds(
                white_s_max=int(white.get("s_max", d_thr.white_s_max)),
                white_v_min=int(white.get("v_min", d_thr.white_v_min)),
                yellow_h_min=int(yellow.get("h_min", d_thr.yellow_h_min)),
                yellow_h_max=int(yellow.get("h_max", d_thr.yellow_h_max)),
                yellow_s_min=int(yellow.get("s_min", d_thr.yellow_s_min)),
                yellow_v_min=int(yellow.get("v_min", d_thr.yellow_v_min)),
            ),
            homography=_matrix3(lane.get("homography", d_lane.homography), "lane.homography"),
            shift=float(lane.get("shift", d_lane.shift)),
            scale=float(lane.get("scale", d_lane.scale)),
        ),
        transport=TransportConfig(
            pool_capacity=int(tp.get("pool_capacity", d_tp.pool_capacity)),
            queue_depth=int(tp.get("queue_depth", d_tp.queue_depth)),
        ),
    )
    cfg.validate()
    return cfg


def load_config(path: str | Path | None = None) -> AppConfig:
    """Load the JSON config file, or the built-in defaults when path is None."""
    if path is None:
        cfg = AppConfig()
        cfg.validate()
        return cfg
    p = Path(path)
    if not p.exists():
        raise MissingCalibration(f"config file not found: {p}")
    with p.open() as fh:
        raw = json.load(fh)
    return config_from_dict(raw)


def config_to_dict(cfg: AppConfig) -> dict:
    """Inverse of config_from_dict, producing the documented JSON schema."""
    return {
        "calibration": {
            "fx": cfg.calibration.fx, "fy": cfg.calibration.fy,
            "cx": cfg.calibration.cx, "cy": cfg.calibration.cy,
            "tx": cfg.calibration.tx, "ty": cfg.calibration.ty,
        },
        "image": {"width": cfg.image_width, "height": cfg.image_height},
        "cam_to_base": {
            "rotation": [list(r) for r in cfg.cam_rotation],
            "translation": list(cfg.cam_translation),
        },
        "obstacle": {
            "box": {
                "x": [cfg.obstacle.x_min, cfg.obstacle.x_max],
                "y": [cfg.obstacle.y_min, cfg.obstacle.y_max],
                "z": [cfg.obstacle.z_min, cfg.obstacle.z_max],
            },
            "rows": cfg.obstacle.rows,
            "cols": cfg.obstacle.cols,
            "min_count": cfg.obstacle.min_count,
            "footprint_cols": [cfg.obstacle.footprint_lo, cfg.obstacle.footprint_hi],
        },
        "lane": {
            "thresholds": {
                "white": {"s_max": cfg.lane.thresholds.white_s_max,
                          "v_min": cfg.lane.thresholds.white_v_min},
                "yellow": {"h_min": cfg.lane.thresholds.yellow_h_min,
                           "h_max": cfg.lane.thresholds.yellow_h_max,
                           "s_min": cfg.lane.thresholds.yellow_s_min,
                           "v_min": cfg.lane.thresholds.yellow_v_min},
            },
            "homography": [list(r) for r in cfg.lane.homography],
            "shift": cfg.lane.shift,
            "scale": cfg.lane.scale,
        },
        "transport": {
            "pool_capacity": cfg.transport.pool_capacity,
            "queue_depth": cfg.transport.queue_depth,
        },
    }
