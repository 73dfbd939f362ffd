"""Projective image transformations.

A transform is encoded by the (dx, dy) displacement of the four image
corners, in units of image width/height, each drawn uniformly from
[-magnitude, +magnitude]. Corner order is TL, TR, BR, BL. The induced 3x3
homography is recovered with a four-point direct linear solve; images are
warped by inverse mapping with bilinear interpolation and zero fill.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    ConfigError,
    DegenerateDistributionError,
    DegenerateTransformError,
)
from .tensor import Tensor

MAX_MAGNITUDE = 0.5  # at 0.5 opposite corners could meet or cross

_UNIT_CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


@dataclass(frozen=True)
class ProjectiveTransform:
    corner_offsets: np.ndarray  # (8,) = (dx_tl, dy_tl, dx_tr, dy_tr, dx_br, dy_br, dx_bl, dy_bl)
    magnitude: float

    def __post_init__(self):
        offs = np.asarray(self.corner_offsets, dtype=np.float64)
        if offs.shape != (8,):
            raise ConfigError(f"corner_offsets must have shape (8,), got {offs.shape}")
        if not 0.0 <= self.magnitude < MAX_MAGNITUDE:
            raise ConfigError(
                f"magnitude must be in [0, {MAX_MAGNITUDE}), got {self.magnitude}"
            )
        if np.any(np.abs(offs) > self.magnitude + 1e-9):
            raise ConfigError("corner offset exceeds the sampling magnitude")
        object.__setattr__(self, "corner_offsets", offs)


@dataclass(frozen=True)
class Homography:
    matrix: np.ndarray  # 3x3, bottom-right fixed to 1, invertible

    def apply(self, points):
        """Map (N, 2) points through the homography."""
        pts = np.asarray(points, dtype=np.float64)
        ones = np.ones((pts.shape[0], 1))
        proj = np.hstack([pts, ones]) @ self.matrix.T
        return proj[:, :2] / proj[:, 2:3]


def _solve_homography(src, dst):
    """Four-point DLT: find H with H @ [x, y, 1] ~ [u, v, 1] for each pair."""
    if np.array_equal(src, dst):
        return Homography(np.eye(3))
    A = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        A[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        b[2 * i] = u
        A[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i + 1] = v
    try:
        h = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise DegenerateTransformError(f"singular corner system: {exc}") from exc
    H = np.array([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])
    if abs(np.linalg.det(H)) <= 1e-8:
        raise DegenerateTransformError("homography is not invertible")
    return Homography(H)


def corners_to_homography(t, width, height):
    """Homography sending the four image corners to their displaced positions.

    Offsets are scaled by the full image width/height, so an offset of 0.1
    on every corner's x is a translation by 0.1 * width pixels.
    """
    if width < 2 or height < 2:
        raise ConfigError(f"image must be at least 2x2, got {width}x{height}")
    src = _UNIT_CORNERS * [width - 1.0, height - 1.0]
    shift = t.corner_offsets.reshape(4, 2) * [float(width), float(height)]
    return _solve_homography(src, src + shift)


def sample_transform(rng, magnitude=0.25):
    """Draw the eight corner offsets independently uniform on [-m, +m]."""
    if not 0.0 <= magnitude < MAX_MAGNITUDE:
        raise ConfigError(
            f"transform magnitude must be in [0, {MAX_MAGNITUDE}): corners could cross"
        )
    for _ in range(10):
        offs = rng.uniform(-magnitude, magnitude, size=8)
        t = ProjectiveTransform(offs, magnitude)
        try:
            _solve_homography(_UNIT_CORNERS, _UNIT_CORNERS + offs.reshape(4, 2))
        except DegenerateTransformError:
            continue
        return t
    raise DegenerateDistributionError(
        f"10 consecutive degenerate transforms at magnitude {magnitude}"
    )


def transform_target(t):
    """Regression target: corner offsets rescaled to [-1, 1] by the magnitude."""
    if t.magnitude == 0.0:
        return Tensor(np.zeros(8, dtype=np.float32))
    return Tensor((t.corner_offsets / t.magnitude).astype(np.float32))


def warp_image(img, h):
    """Inverse-warp a CxHxW image; out-of-image source coordinates fill with 0."""
    data = img.data if isinstance(img, Tensor) else np.asarray(img)
    C, H, W = data.shape
    if np.array_equal(h.matrix, np.eye(3)):
        hinv = np.eye(3)
    else:
        try:
            hinv = np.linalg.inv(h.matrix)
        except np.linalg.LinAlgError as exc:
            raise DegenerateTransformError(f"non-invertible homography: {exc}") from exc

    ys, xs = np.meshgrid(np.arange(H, dtype=np.float64),
                         np.arange(W, dtype=np.float64), indexing="ij")
    denom = hinv[2, 0] * xs + hinv[2, 1] * ys + hinv[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = (hinv[0, 0] * xs + hinv[0, 1] * ys + hinv[0, 2]) / denom
        sy = (hinv[1, 0] * xs + hinv[1, 1] * ys + hinv[1, 2]) / denom
    valid = (
        np.isfinite(sx) & np.isfinite(sy)
        & (sx >= 0) & (sx <= W - 1) & (sy >= 0) & (sy <= H - 1)
    )
    sx = np.where(valid, sx, 0.0)
    sy = np.where(valid, sy, 0.0)

    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)

    src = data.astype(np.float64)
    out = (
        src[:, y0, x0] * ((1 - fy) * (1 - fx))
        + src[:, y0, x1] * ((1 - fy) * fx)
        + src[:, y1, x0] * (fy * (1 - fx))
        + src[:, y1, x1] * (fy * fx)
    )
    out *= valid
    out = out.astype(data.dtype)
    return Tensor(out) if isinstance(img, Tensor) else out
