"""SE(2) poses, world/pixel mapping, and raster-image transforms.

Images throughout the package are dense ``float`` numpy arrays of shape
``(H, W, C)`` in row-major (row, col, channel) order.  Rows index the long
(1 m) table dimension, columns the short (0.5 m) one.  Pixel ``(r, c)``
covers the world square ``[r*res, (r+1)*res) x [c*res, (c+1)*res)`` relative
to the map origin, and its world coordinate is the square's center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

TWO_PI = 2.0 * math.pi


class GeometryError(ValueError):
    """Raised for out-of-bounds poses or invalid pixel indices."""


def wrap_angle(theta: float) -> float:
    """Normalize an angle to the half-open interval (-pi, pi]."""
    t = theta % TWO_PI
    if t > math.pi:
        t -= TWO_PI
    return t


@dataclass(frozen=True)
class Pose2:
    """Planar pose: translation in meters, rotation in radians.

    ``theta`` is normalized to (-pi, pi] on construction.  When a Pose2 is
    used as a pixel-space transform, ``x`` is a row offset and ``y`` a column
    offset, both in pixels.
    """

    x: float
    y: float
    theta: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.theta)):
            raise GeometryError(f"non-finite pose ({self.x}, {self.y}, {self.theta})")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


class PixelCoord(NamedTuple):
    row: int
    col: int


@dataclass(frozen=True)
class WorkspaceMap:
    """Mapping between the tabletop world frame and a raster grid."""

    origin: Pose2
    resolution: float
    height: int
    width: int

    def __post_init__(self):
        if self.resolution <= 0:
            raise GeometryError(f"resolution must be positive, got {self.resolution}")
        if self.height < 1 or self.width < 1:
            raise GeometryError(f"bad grid shape ({self.height}, {self.width})")

    @property
    def extent(self) -> tuple[float, float]:
        """World size (x-span, y-span) in meters."""
        return self.height * self.resolution, self.width * self.resolution


def default_map(height: int = 160, width: int = 80) -> WorkspaceMap:
    """Map for the 1 m x 0.5 m tabletop at the given raster size.

    160x80 is the desk-scale working resolution (6.25 mm/pixel); 320x160
    recovers the full-scale 3.125 mm/pixel grid.
    """
    return WorkspaceMap(origin=Pose2(0.0, 0.0), resolution=1.0 / height, height=height, width=width)


def world_to_pixel(p: Pose2, m: WorkspaceMap) -> PixelCoord:
    """Quantize a world pose to the pixel whose square contains it."""
    r = math.floor((p.x - m.origin.x) / m.resolution)
    c = math.floor((p.y - m.origin.y) / m.resolution)
    if not (0 <= r < m.height and 0 <= c < m.width):
        raise GeometryError(f"pose ({p.x}, {p.y}) outside workspace")
    return PixelCoord(r, c)


def pixel_to_world(px: PixelCoord, m: WorkspaceMap) -> Pose2:
    """World pose of a pixel's center."""
    r, c = px
    if not (0 <= r < m.height and 0 <= c < m.width):
        raise GeometryError(f"pixel ({r}, {c}) outside {m.height}x{m.width} grid")
    return Pose2(
        m.origin.x + (r + 0.5) * m.resolution,
        m.origin.y + (c + 0.5) * m.resolution,
        0.0,
    )


def require_grid(img: np.ndarray) -> np.ndarray:
    """Validate the (H, W, C) image contract and return the array."""
    img = np.asarray(img)
    if img.ndim != 3:
        raise GeometryError(f"expected (H, W, C) image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise GeometryError("image contains non-finite values")
    return img


def _image_center(h: int, w: int) -> np.ndarray:
    # Pixel-center convention: rotating by pi maps (r, c) -> (H-1-r, W-1-c).
    return np.array([(h - 1) / 2.0, (w - 1) / 2.0])


def transform_grid(
    img: np.ndarray,
    t: Pose2,
    padding: str = "zero",
    sampling: str = "bilinear",
) -> np.ndarray:
    """Resample an image under an SE(2) pixel transform about its center.

    ``t`` is a pixel-space transform: destination = R(theta) @ (source -
    center) + center + (t.x, t.y).  Output shape equals input shape; samples
    that fall outside are filled per ``padding`` ("zero" or "circular").
    """
    img = require_grid(img)
    if padding not in ("zero", "circular"):
        raise GeometryError(f"unknown padding {padding!r}")
    if sampling not in ("nearest", "bilinear"):
        raise GeometryError(f"unknown sampling {sampling!r}")
    h, w, _ = img.shape

    dr, dc = float(t.x), float(t.y)
    if t.theta == 0.0 and sampling == "nearest" and dr == round(dr) and dc == round(dc):
        # Integer shift: exact permutation (circular) or exact slice copy.
        if padding == "circular":
            return np.roll(img, (int(dr), int(dc)), axis=(0, 1))
        out = np.zeros_like(img)
        src_r = np.arange(h) - int(dr)
        src_c = np.arange(w) - int(dc)
        rok = (src_r >= 0) & (src_r < h)
        cok = (src_c >= 0) & (src_c < w)
        out[np.ix_(rok, cok)] = img[np.ix_(src_r[rok], src_c[cok])]
        return out

    center = _image_center(h, w)
    rr, cc = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    dy_r = rr - center[0] - dr
    dy_c = cc - center[1] - dc
    cos_t, sin_t = math.cos(-t.theta), math.sin(-t.theta)
    src_r = cos_t * dy_r - sin_t * dy_c + center[0]
    src_c = sin_t * dy_r + cos_t * dy_c + center[1]
    return _sample(img, src_r, src_c, padding, sampling)


def _sample(img, src_r, src_c, padding, sampling):
    h, w, c = img.shape
    if sampling == "nearest":
        r = np.rint(src_r).astype(np.int64)
        cl = np.rint(src_c).astype(np.int64)
        if padding == "circular":
            return img[r % h, cl % w]
        valid = (r >= 0) & (r < h) & (cl >= 0) & (cl < w)
        out = np.zeros(src_r.shape + (c,), dtype=img.dtype)
        out[valid] = img[r[valid], cl[valid]]
        return out

    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr = (src_r - r0)[..., None]
    fc = (src_c - c0)[..., None]
    corners = []
    for ro, co in ((0, 0), (0, 1), (1, 0), (1, 1)):
        ri, ci = r0 + ro, c0 + co
        if padding == "circular":
            val = img[ri % h, ci % w]
        else:
            valid = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
            val = np.zeros(src_r.shape + (c,), dtype=float)
            val[valid] = img[ri[valid], ci[valid]]
        corners.append(val)
    top = corners[0] * (1 - fc) + corners[1] * fc
    bot = corners[2] * (1 - fc) + corners[3] * fc
    out = top * (1 - fr) + bot * fr
    return out.astype(img.dtype, copy=False)


def transform_pixel(px: tuple[int, int], t: Pose2, h: int, w: int) -> tuple[int, int]:
    """Destination pixel of ``px`` under the transform used by transform_grid."""
    center = _image_center(h, w)
    d = np.array([px[0], px[1]], dtype=float) - center
    cos_t, sin_t = math.cos(t.theta), math.sin(t.theta)
    out_r = cos_t * d[0] - sin_t * d[1] + center[0] + t.x
    out_c = sin_t * d[0] + cos_t * d[1] + center[1] + t.y
    return int(round(out_r)), int(round(out_c))


def rotated_crop_indices(
    center: tuple[int, int], angle: float, size: int, h: int, w: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest source indices for a size x size patch rotated about a pixel.

    Returns (rows, cols, valid) where invalid entries index pixel (0, 0) and
    must be masked by the caller.  Patch entry (i, j) samples the source at
    ``center + R(angle) @ (i - size//2, j - size//2)``.
    """
    if size % 2 == 0:
        raise GeometryError(f"crop size must be odd, got {size}")
    half = size // 2
    di, dj = np.meshgrid(
        np.arange(-half, half + 1, dtype=float),
        np.arange(-half, half + 1, dtype=float),
        indexing="ij",
    )
    cos_t, sin_t = math.cos(angle), math.sin(angle)
    rows = np.rint(center[0] + cos_t * di - sin_t * dj).astype(np.int64)
    cols = np.rint(center[1] + sin_t * di + cos_t * dj).astype(np.int64)
    valid = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    rows = np.where(valid, rows, 0)
    cols = np.where(valid, cols, 0)
    return rows, cols, valid


def rotate_crop(
    img: np.ndarray,
    center: tuple[int, int],
    angle: float,
    size: int,
    pad_value: float = 0.0,
) -> np.ndarray:
    """Extract a size x size x C patch of the image rotated by -angle about
    ``center``; out-of-image samples take ``pad_value``."""
    img = require_grid(img)
    h, w, c = img.shape
    rows, cols, valid = rotated_crop_indices(center, angle, size, h, w)
    patch = img[rows, cols].copy()
    patch[~valid] = pad_value
    return patch
