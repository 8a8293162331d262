"""Lane detection: HSV thresholding, bird's-eye warp, polynomial
least-squares lane fit, and the refit into a drivable trajectory.

The polynomial fit builds the (k+1)x(k+1) normal-equation system of power
sums sum(x^j) with right-hand side sum(y * x^j) and solves it by Gaussian
elimination with partial pivoting in double precision. Abscissae are
normalized to [0, 1] before the power sums are accumulated (bounding
sum(x^6) for pixel-scale inputs) and the coefficients rescaled afterwards.

The lane polynomial is degree 2 in image coordinates (column as a
function of row); the trajectory polynomial is degree 3 in the car base
frame, refit from 30 samples taken evenly along the image height.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import LaneThresholds
from .errors import (
    InsufficientPixels,
    NoLanePixels,
    SingularHomography,
    SingularSystem,
)

LABEL_NONE = 0
LABEL_WHITE = 1
LABEL_YELLOW = 2

WHITE = "white"
YELLOW = "yellow"

TRAJECTORY_SAMPLES = 30
LANE_DEGREE = 2
TRAJECTORY_DEGREE = 3

# grayscale encoding of the mask labels, one image for both colors
_GRAY_LEVELS = np.array([0, 255, 128], dtype=np.uint8)


def rgb_to_hsv(color: np.ndarray) -> np.ndarray:
    """Convert (h, w, 3) uint8 RGB to HSV with H in [0,180), S and V in [0,256).

    Same conversion as the scalar definition: V = max channel,
    S = round(255 * delta / V), H = round(hue_degrees / 2) mod 180 with the
    red/green/blue sector rules and round-half-up rounding.
    """
    rgb = np.asarray(color).astype(np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = np.maximum(np.maximum(r, g), b)
    minc = np.minimum(np.minimum(r, g), b)
    delta = maxc - minc
    v = maxc
    safe_max = np.where(maxc > 0, maxc, 1.0)
    s = np.where(maxc > 0, np.floor(255.0 * delta / safe_max + 0.5), 0.0)
    safe_delta = np.where(delta > 0, delta, 1.0)
    hue = np.select(
        [r == maxc, g == maxc],
        [60.0 * (((g - b) / safe_delta) % 6.0),
         60.0 * ((b - r) / safe_delta + 2.0)],
        default=60.0 * ((r - g) / safe_delta + 4.0),
    )
    h = np.where(delta > 0, np.floor(hue / 2.0 + 0.5) % 180.0, 0.0)
    out = np.empty(rgb.shape, dtype=np.uint8)
    out[..., 0] = h
    out[..., 1] = s
    out[..., 2] = v
    return out


def threshold_colors(hsv: np.ndarray, t: LaneThresholds) -> np.ndarray:
    """Label each pixel none/white/yellow. White wins where both match."""
    h = hsv[..., 0]
    s = hsv[..., 1]
    v = hsv[..., 2]
    mask = np.zeros(hsv.shape[:2], dtype=np.uint8)
    yellow = (h >= t.yellow_h_min) & (h <= t.yellow_h_max) & (s >= t.yellow_s_min) & (v >= t.yellow_v_min)
    white = (s <= t.white_s_max) & (v >= t.white_v_min)
    mask[yellow] = LABEL_YELLOW
    mask[white] = LABEL_WHITE
    return mask


def mask_to_grayscale(mask: np.ndarray) -> np.ndarray:
    """One grayscale image representing both lane colors (white 255, yellow 128)."""
    return _GRAY_LEVELS[mask]


def invert_homography(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64).reshape(3, 3)
    det = np.linalg.det(h)
    if abs(det) <= 1e-12:
        raise SingularHomography(f"homography determinant {det} too close to zero")
    return np.linalg.inv(h)


def build_warp_lut(h: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Flat source index per destination pixel (-1 = out of bounds).

    Destination pixel (row r, col c) samples the source at the
    nearest-neighbor rounding of H^-1 . (c, r, 1). The homography is fixed
    per pipeline, so this table is computed once and reused per frame.
    """
    hinv = invert_homography(h)
    rows, cols = shape
    cc, rr = np.meshgrid(np.arange(cols, dtype=np.float64), np.arange(rows, dtype=np.float64))
    ones = np.ones_like(cc)
    sx = hinv[0, 0] * cc + hinv[0, 1] * rr + hinv[0, 2] * ones
    sy = hinv[1, 0] * cc + hinv[1, 1] * rr + hinv[1, 2] * ones
    sw = hinv[2, 0] * cc + hinv[2, 1] * rr + hinv[2, 2] * ones
    with np.errstate(divide="ignore", invalid="ignore"):
        px = sx / sw
        py = sy / sw
    valid = np.isfinite(px) & np.isfinite(py)
    px = np.where(valid, px, -1.0)
    py = np.where(valid, py, -1.0)
    ix = np.floor(px + 0.5)
    iy = np.floor(py + 0.5)
    valid &= (ix >= 0) & (ix < cols) & (iy >= 0) & (iy < rows)
    lut = np.where(valid, (iy * cols + ix).astype(np.int64), -1)
    return lut.astype(np.int64)


def warp_with_lut(mask: np.ndarray, lut: np.ndarray) -> np.ndarray:
    flat = mask.reshape(-1)
    out = np.where(lut >= 0, flat[np.maximum(lut, 0)], LABEL_NONE)
    return out.astype(mask.dtype)


def warp_birds_eye(mask: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Projective remap of the label mask via inverse mapping with
    nearest-neighbor sampling; unmapped destination pixels become none."""
    return warp_with_lut(mask, build_warp_lut(h, mask.shape))


def select_lane_color(mask: np.ndarray) -> str:
    """Pick the color with more pixels; ties go to white."""
    n_white = int(np.count_nonzero(mask == LABEL_WHITE))
    n_yellow = int(np.count_nonzero(mask == LABEL_YELLOW))
    if n_white == 0 and n_yellow == 0:
        raise NoLanePixels("mask contains no white or yellow pixels")
    return WHITE if n_white >= n_yellow else YELLOW


@dataclass
class PolyCoeffs:
    """Polynomial a_0 + a_1 x + ... + a_k x^k with the normal-equation
    residual recorded at fit time."""

    coeffs: np.ndarray
    residual: float = 0.0

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.coeffs)):
            raise SingularSystem("polynomial coefficients are not finite")

    @property
    def degree(self) -> int:
        return self.coeffs.shape[0] - 1

    def __call__(self, x):
        result = np.zeros_like(np.asarray(x, dtype=np.float64)) + self.coeffs[-1]
        for a in self.coeffs[-2::-1]:
            result = result * x + a
        return result


def normal_equations(xs: np.ndarray, ys: np.ndarray, degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Power-sum matrix M[i][j] = sum(x^(i+j)) and rhs b[i] = sum(y * x^i)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    powers = np.empty((2 * degree + 1,), dtype=np.float64)
    acc = np.ones_like(xs)
    moments = np.empty((degree + 1,), dtype=np.float64)
    for j in range(2 * degree + 1):
        powers[j] = acc.sum()
        if j <= degree:
            moments[j] = (ys * acc).sum()
        acc = acc * xs
    m = np.empty((degree + 1, degree + 1), dtype=np.float64)
    for i in range(degree + 1):
        for j in range(degree + 1):
            m[i, j] = powers[i + j]
    return m, moments


def solve_linear(m: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Gaussian elimination with partial pivoting in double precision."""
    a = np.array(m, dtype=np.float64)
    rhs = np.array(b, dtype=np.float64)
    n = rhs.shape[0]
    tol = 1e-12 * max(1.0, float(np.max(np.abs(a))))
    for k in range(n):
        pivot_row = k + int(np.argmax(np.abs(a[k:, k])))
        if abs(a[pivot_row, k]) <= tol:
            raise SingularSystem("normal-equation matrix is singular")
        if pivot_row != k:
            a[[k, pivot_row]] = a[[pivot_row, k]]
            rhs[[k, pivot_row]] = rhs[[pivot_row, k]]
        for i in range(k + 1, n):
            factor = a[i, k] / a[k, k]
            if factor != 0.0:
                a[i, k:] -= factor * a[k, k:]
                rhs[i] -= factor * rhs[k]
    x = np.empty(n, dtype=np.float64)
    for k in range(n - 1, -1, -1):
        x[k] = (rhs[k] - a[k, k + 1:] @ x[k + 1:]) / a[k, k]
    return x


def polyfit(xs, ys, degree: int) -> PolyCoeffs:
    """Least-squares polynomial fit via the power-sum normal equations.

    Needs at least degree+1 points with degree+1 distinct abscissae.
    """
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    ys = np.asarray(ys, dtype=np.float64).reshape(-1)
    if xs.shape != ys.shape:
        raise SingularSystem("x and y must have the same length")
    if xs.size < degree + 1:
        raise SingularSystem(f"need at least {degree + 1} points for degree {degree}, got {xs.size}")
    scale = float(np.max(np.abs(xs)))
    if scale == 0.0:
        scale = 1.0
    xn = xs / scale
    m, b = normal_equations(xn, ys, degree)
    a = solve_linear(m, b)
    a = a / scale ** np.arange(degree + 1)
    m0, b0 = normal_equations(xs, ys, degree)
    denom = float(np.linalg.norm(b0))
    residual = float(np.linalg.norm(m0 @ a - b0)) / (denom if denom > 0 else 1.0)
    return PolyCoeffs(coeffs=a, residual=residual)


def fit_lane(mask: np.ndarray, color: str) -> PolyCoeffs:
    """Degree-2 fit of the lane's column coordinate as a function of row.

    Rows are the regression abscissa because the trajectory is sampled
    along the image height.
    """
    label = LABEL_WHITE if color == WHITE else LABEL_YELLOW
    rows, cols = np.nonzero(mask == label)
    if rows.size < LANE_DEGREE + 1 or np.unique(rows).size < LANE_DEGREE + 1:
        raise InsufficientPixels(
            f"need >= {LANE_DEGREE + 1} {color} pixels on >= {LANE_DEGREE + 1} distinct rows, "
            f"got {rows.size}")
    return polyfit(rows, cols, LANE_DEGREE)


@dataclass
class TrajectorySamples:
    """Exactly 30 lane samples, evenly spaced along the image height."""

    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.float64).reshape(-1)
        self.ys = np.asarray(self.ys, dtype=np.float64).reshape(-1)
        if self.xs.shape[0] != TRAJECTORY_SAMPLES or self.ys.shape[0] != TRAJECTORY_SAMPLES:
            raise SingularSystem(f"trajectory must hold exactly {TRAJECTORY_SAMPLES} samples")
        if not np.all(np.diff(self.xs) > 0):
            raise SingularSystem("sample abscissae must be strictly increasing")


def sample_trajectory(lane: PolyCoeffs, height: int = 480) -> TrajectorySamples:
    """Evaluate the lane polynomial at x_i = i * height / 30, i = 0..29."""
    xs = np.arange(TRAJECTORY_SAMPLES, dtype=np.float64) * (height / TRAJECTORY_SAMPLES)
    return TrajectorySamples(xs=xs, ys=lane(xs))


def fit_trajectory(samples: TrajectorySamples, shift: float = 320.0, scale: float = 0.005,
                   height: int = 480) -> PolyCoeffs:
    """Shift samples to the image middle, map them into the car base frame,
    and refit with degree 3.

    Forward distance grows toward the top of the image
    (forward = scale * (height - x_i)); lateral offset is positive to the
    left (lateral = scale * (shift - y_i)).
    """
    forward = scale * (height - samples.xs)
    lateral = scale * (shift - samples.ys)
    return polyfit(forward, lateral, TRAJECTORY_DEGREE)


@dataclass
class LaneDetection:
    """Outcome of the full per-frame lane pipeline."""

    valid: bool
    color: str | None = None
    lane: PolyCoeffs | None = None
    trajectory: PolyCoeffs | None = None
    samples: TrajectorySamples | None = None


class LanePipeline:
    """Runs the full detection chain with a fixed config: RGB -> HSV ->
    threshold -> bird's-eye warp -> color choice -> lane fit -> 30 samples
    -> base-frame trajectory refit."""

    def __init__(self, thresholds: LaneThresholds, homography, shift: float, scale: float,
                 image_shape: tuple[int, int]):
        self.thresholds = thresholds
        self.shift = shift
        self.scale = scale
        self.height = image_shape[0]
        self._lut = build_warp_lut(np.asarray(homography, dtype=np.float64), image_shape)

    def detect(self, color_image: np.ndarray) -> LaneDetection:
        hsv = rgb_to_hsv(color_image)
        mask = threshold_colors(hsv, self.thresholds)
        warped = warp_with_lut(mask, self._lut)
        try:
            color = select_lane_color(warped)
            lane = fit_lane(warped, color)
        except (NoLanePixels, InsufficientPixels):
            return LaneDetection(valid=False)
        samples = sample_trajectory(lane, height=self.height)
        trajectory = fit_trajectory(samples, shift=self.shift, scale=self.scale, height=self.height)
        return LaneDetection(valid=True, color=color, lane=lane, trajectory=trajectory, samples=samples)
