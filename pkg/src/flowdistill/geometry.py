"""Equal-area sphere-to-square map, pinhole cameras and ray/sphere queries.

The map sends a direction with polar angle theta and azimuth phi in quadrant
k = floor(phi / (pi/2)) to

    x = sqrt(1 - cos theta),  y = x * (4 phi_k / pi - 1),   phi_k = phi - k pi/2,

rotates the wedge by k * 90 degrees and scales by 1/sqrt(2).  The four wedges
tile [-1, 1]^2 and the unscaled Jacobian is (2/pi) sin theta, so uniform points
on the sphere stay uniform in the square.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DomainError

HALF_PI = 0.5 * math.pi
_ROT_COS = np.array([1.0, 0.0, -1.0, 0.0])
_ROT_SIN = np.array([0.0, 1.0, 0.0, -1.0])
_SCALE = 1.0 / math.sqrt(2.0)


def _wedge_to_square(one_minus_cos, phi_local, k, scaled):
    xr = np.sqrt(np.maximum(one_minus_cos, 0.0))
    yr = xr * (phi_local / (0.5 * HALF_PI) - 1.0)
    k = np.asarray(k, dtype=int)
    c, s = _ROT_COS[k], _ROT_SIN[k]
    out = np.stack([xr * c - yr * s, xr * s + yr * c], axis=-1)
    return out * _SCALE if scaled else out


def sphere_map_angles(theta, phi, scaled: bool = False):
    """Map spherical angles (theta in [0, pi], phi in [0, 2 pi)) to the square."""
    theta = np.asarray(theta, dtype=float)
    phi = np.mod(np.asarray(phi, dtype=float), 2 * math.pi)
    k = np.minimum(np.floor(phi / HALF_PI), 3).astype(int)
    return _wedge_to_square(2.0 * np.sin(0.5 * theta) ** 2, phi - k * HALF_PI, k, scaled)


def _one_minus_cos(p):
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    rho2 = x * x + y * y
    r = np.sqrt(rho2 + z * z)
    if np.any(r < 1e-12):
        raise DomainError("the origin has no direction on the sphere")
    # (r - z) / r loses precision near the north pole
    with np.errstate(invalid="ignore", divide="ignore"):
        north = rho2 / (r * (r + z))
    return np.where(z >= 0, north, 1.0 - z / r)


def sphere_map(points, scaled: bool = True):
    """Warp world points (on or near the unit sphere) into E_ref = [-1, 1]^2."""
    p = np.asarray(points, dtype=float)
    omc = _one_minus_cos(p)
    phi = np.mod(np.arctan2(p[..., 1], p[..., 0]), 2 * math.pi)
    k = np.minimum(np.floor(phi / HALF_PI), 3).astype(int)
    return _wedge_to_square(omc, phi - k * HALF_PI, k, scaled)


def sphere_map_in_quadrant(points, k: int, scaled: bool = True):
    """Like ``sphere_map`` but forces every point into quadrant wedge ``k``.

    Used for triangle pieces that were clipped to a single quadrant; azimuths are
    clamped to the wedge so boundary vertices land on the shared edge.
    """
    p = np.asarray(points, dtype=float)
    omc = _one_minus_cos(p)
    phi = np.arctan2(p[..., 1], p[..., 0]) - k * HALF_PI
    phi = np.mod(phi + math.pi, 2 * math.pi) - math.pi
    on_axis = p[..., 0] ** 2 + p[..., 1] ** 2 < 1e-24
    phi = np.where(on_axis, 0.5 * HALF_PI, np.clip(phi, 0.0, HALF_PI))
    return _wedge_to_square(omc, phi, np.full(phi.shape, k), scaled)


def quadrant_of(points):
    p = np.asarray(points, dtype=float)
    phi = np.mod(np.arctan2(p[..., 1], p[..., 0]), 2 * math.pi)
    return np.minimum(np.floor(phi / HALF_PI), 3).astype(int)


def bilinear_weights(coords, resolution: int):
    """Indices and weights of the 4 cells around continuous square coordinates.

    Cell (i, j) of an R x R grid over [-1, 1]^2 has its center at
    (-1 + (j + 0.5) 2/R, -1 + (i + 0.5) 2/R); row i follows the y axis.
    Returns flat indices i * R + j and weights, both shaped (..., 4).
    """
    coords = np.asarray(coords, dtype=float)
    u = (coords[..., 0] + 1.0) * 0.5 * resolution - 0.5
    v = (coords[..., 1] + 1.0) * 0.5 * resolution - 0.5
    j0 = np.floor(u)
    i0 = np.floor(v)
    fu, fv = u - j0, v - i0
    j0, i0 = j0.astype(int), i0.astype(int)
    js = np.clip(np.stack([j0, j0 + 1, j0, j0 + 1], axis=-1), 0, resolution - 1)
    is_ = np.clip(np.stack([i0, i0, i0 + 1, i0 + 1], axis=-1), 0, resolution - 1)
    w = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=-1)
    return is_ * resolution + js, w


@dataclass(frozen=True)
class Camera:
    """Pinhole camera orbiting the origin and looking at it (angles in degrees)."""

    radius: float = 2.5
    elevation: float = 0.0
    azimuth: float = 0.0
    fov: float = 40.0
    height: int = 32
    width: int = 32

    def __post_init__(self):
        if self.radius <= 1.0:
            raise DomainError("camera must sit outside the unit sphere")
        if self.height < 1 or self.width < 1:
            raise DomainError("resolution must be positive")

    @cached_property
    def position(self) -> np.ndarray:
        el, az = math.radians(self.elevation), math.radians(self.azimuth)
        return self.radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])

    @cached_property
    def basis(self):
        """(right, up, forward) unit vectors."""
        f = -self.position / np.linalg.norm(self.position)
        up = np.array([0.0, 0.0, 1.0])
        if np.linalg.norm(np.cross(f, up)) < 1e-9:
            up = np.array([0.0, 1.0, 0.0])
        right = np.cross(f, up)
        right /= np.linalg.norm(right)
        return right, np.cross(right, f), f

    @property
    def _half_extent(self):
        ty = math.tan(math.radians(self.fov) / 2)
        return ty * self.width / self.height, ty

    def directions(self, rows, cols) -> np.ndarray:
        """Unit ray directions through continuous pixel coordinates (row, col)."""
        right, up, f = self.basis
        hx, hy = self._half_extent
        sx = (np.asarray(cols, dtype=float) / self.width * 2 - 1) * hx
        sy = (1 - np.asarray(rows, dtype=float) / self.height * 2) * hy
        d = f + sx[..., None] * right + sy[..., None] * up
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def pixel_directions(self) -> np.ndarray:
        rows, cols = np.meshgrid(np.arange(self.height) + 0.5, np.arange(self.width) + 0.5, indexing="ij")
        return self.directions(rows, cols)

    def corner_directions(self) -> np.ndarray:
        rows, cols = np.meshgrid(np.arange(self.height + 1.0), np.arange(self.width + 1.0), indexing="ij")
        return self.directions(rows, cols)

    def project(self, points):
        """Continuous (row, col) image coordinates and camera-space depth of world points."""
        right, up, f = self.basis
        d = np.asarray(points, dtype=float) - self.position
        z = d @ f
        hx, hy = self._half_extent
        cols = ((d @ right) / z / hx + 1) * 0.5 * self.width
        rows = (1 - (d @ up) / z / hy) * 0.5 * self.height
        return rows, cols, z


def intersect_unit_sphere(origin, dirs):
    """Nearest intersection of rays with the unit sphere.

    Returns (depth, hit, points); depth is the ray length (inf on a miss).
    """
    dirs = np.asarray(dirs, dtype=float)
    b = dirs @ origin
    c = float(origin @ origin) - 1.0
    disc = b * b - c
    hit = disc >= 0
    depth = np.where(hit, -b - np.sqrt(np.where(hit, disc, 0.0)), np.inf)
    points = origin + np.where(hit, depth, 0.0)[..., None] * dirs
    # hits satisfy |p| = 1 up to rounding; project to remove the drift
    points = np.where(hit[..., None], points / np.linalg.norm(np.where(hit[..., None], points, 1.0), axis=-1, keepdims=True), points)
    return depth, hit, points
