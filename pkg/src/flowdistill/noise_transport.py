"""Multi-view consistent Gaussian noise.

Every opaque pixel is split into two triangles whose corners are cast onto the
sphere, warped into the reference square and rasterized against an R x R grid
of i.i.d. standard-normal cells.  The pixel value is the sum of the covered
cells divided by sqrt(count), which keeps each pixel exactly N(0, 1) while two
pixels that see the same surface share cells and therefore correlate.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import sparse

from .errors import DomainError
from .geometry import (
    Camera,
    bilinear_weights,
    intersect_unit_sphere,
    sphere_map,
    sphere_map_in_quadrant,
)
from .renderer import view_geometry

DEFAULT_OPACITY_THRESHOLD = 0.5

# half-space signs (x, y) of each azimuth quadrant
_QUADRANT_SIGNS = ((1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0))


@dataclass
class ReferenceNoise:
    """Reference-space noise grid, background noise and the OU injection state.

    ``history`` records every injection rate applied so a grid can be rebuilt
    from ``seed`` alone (see ``save`` / ``load``).
    """

    grid: np.ndarray
    bg: np.ndarray
    seed: int
    gamma: float = 0.0
    rng: np.random.Generator = field(default=None, repr=False)
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, resolution: int = 512, channels: int = 3, bg_shape=(32, 32), seed: int = 0,
               gamma: float = 0.0) -> "ReferenceNoise":
        if not 0.0 <= gamma < 1.0:
            raise DomainError(f"injection rate must lie in [0, 1), got {gamma}")
        rng = np.random.default_rng(seed)
        grid = rng.standard_normal((resolution, resolution, channels))
        bg = rng.standard_normal((*bg_shape, channels))
        return cls(grid, bg, seed, gamma, rng)

    @property
    def resolution(self) -> int:
        return self.grid.shape[0]

    @property
    def channels(self) -> int:
        return self.grid.shape[-1]

    def inject(self, rng: np.random.Generator | None = None, gamma: float | None = None) -> "ReferenceNoise":
        """OU refresh of grid and background in place: sqrt(1-g) old + sqrt(g) fresh."""
        gamma = self.gamma if gamma is None else gamma
        if not 0.0 <= gamma < 1.0:
            raise DomainError(f"injection rate must lie in [0, 1), got {gamma}")
        if gamma == 0.0:
            return self
        rng = self.rng if rng is None else rng
        keep, fresh = math.sqrt(1.0 - gamma), math.sqrt(gamma)
        self.grid = keep * self.grid + fresh * rng.standard_normal(self.grid.shape)
        self.bg = keep * self.bg + fresh * rng.standard_normal(self.bg.shape)
        self.history.append(gamma)
        return self

    def save(self, path: str | Path) -> None:
        meta = {
            "seed": self.seed,
            "resolution": self.resolution,
            "channels": self.channels,
            "bg_shape": list(self.bg.shape[:2]),
            "gamma": self.gamma,
            "history": list(self.history),
        }
        Path(path).write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "ReferenceNoise":
        """Replay a saved grid; only valid for grids driven by their own rng."""
        meta = json.loads(Path(path).read_text())
        ref = cls.create(meta["resolution"], meta["channels"], tuple(meta["bg_shape"]), meta["seed"], meta["gamma"])
        for g in meta["history"]:
            ref.inject(gamma=g)
        return ref


def inject(ref: ReferenceNoise, rng: np.random.Generator | None = None) -> ReferenceNoise:
    return ref.inject(rng)


@dataclass
class PixelFootprint:
    pixel: tuple
    triangles: list
    cells: np.ndarray

    @property
    def count(self) -> int:
        return len(self.cells)


@dataclass
class Footprints:
    """Covered-cell sets for all opaque pixels of one view.

    ``matrix`` is a binary (n_opaque x R*R) CSR matrix, row p holding the cells
    of Omega_p; ``pixels`` are flat pixel indices into the H x W image.
    """

    shape: tuple
    resolution: int
    pixels: np.ndarray
    matrix: sparse.csr_matrix
    triangles: np.ndarray
    warped: list = field(repr=False, default_factory=list)
    clamped_corners: int = 0
    fallbacks: int = 0

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.matrix.indptr)

    def footprint(self, i: int) -> PixelFootprint:
        row, col = np.unravel_index(self.pixels[i], self.shape)
        cells = self.matrix.indices[self.matrix.indptr[i]:self.matrix.indptr[i + 1]]
        tris = self.warped[i] if self.warped else []
        return PixelFootprint((int(row), int(col)), tris, cells.copy())

    def aggregate(self, grid: np.ndarray) -> np.ndarray:
        """(n_opaque, C) noise values: sum of covered cells / sqrt(count)."""
        flat = grid.reshape(self.resolution * self.resolution, -1)
        return (self.matrix @ flat) / np.sqrt(self.counts)[:, None]

    def overlap(self, other: "Footprints", i, j) -> np.ndarray:
        """Predicted noise correlation |Omega_i & Omega_j| / sqrt(n_i n_j) for row pairs."""
        i, j = np.asarray(i), np.asarray(j)
        shared = np.asarray(self.matrix[i].multiply(other.matrix[j]).sum(axis=1)).ravel()
        return shared / np.sqrt(self.counts[i] * other.counts[j])


def triangulate_and_project(camera: Camera, depth, opacity, o_th: float = DEFAULT_OPACITY_THRESHOLD):
    """World-space corner triangles of every pixel with opacity above ``o_th``.

    Returns ``(pixels, triangles, clamped)`` with ``triangles`` shaped
    (n, 2, 3, 3).  Corner rays that miss the sphere are clamped to the nearest
    corner of the same pixel that hits (adjacent before diagonal), falling back
    to the pixel-center hit; ``clamped`` counts such corners.
    """
    depth = np.asarray(depth, dtype=float)
    opacity = np.asarray(opacity, dtype=float)
    if depth.shape != (camera.height, camera.width) or opacity.shape != depth.shape:
        raise DomainError("depth and opacity must be shaped (H, W)")
    pixels = np.flatnonzero(opacity.ravel() > o_th)
    if pixels.size == 0:
        return pixels, np.zeros((0, 2, 3, 3)), 0
    rows, cols = np.unravel_index(pixels, depth.shape)
    _, hit, pts = intersect_unit_sphere(camera.position, camera.corner_directions())
    # corner order: top-left, top-right, bottom-left, bottom-right
    cr = np.stack([rows, rows, rows + 1, rows + 1], axis=1)
    cc = np.stack([cols, cols + 1, cols, cols + 1], axis=1)
    corners = pts[cr, cc]
    ok = hit[cr, cc]
    center = camera.position + depth.ravel()[pixels, None] * camera.pixel_directions().reshape(-1, 3)[pixels]
    center /= np.linalg.norm(center, axis=-1, keepdims=True)
    clamped = int(np.sum(~ok))
    if clamped:
        preference = ((1, 2, 3), (0, 3, 2), (0, 3, 1), (1, 2, 0))
        fixed = corners.copy()
        for c, order in enumerate(preference):
            miss = ~ok[:, c]
            repl = center.copy()
            for alt in reversed(order):
                repl = np.where(ok[:, alt, None], corners[:, alt], repl)
            fixed[miss, c] = repl[miss]
        corners = fixed
    tri = np.stack([corners[:, [0, 1, 3]], corners[:, [0, 3, 2]]], axis=1)
    return pixels, tri, clamped


def _clip(poly, normal):
    """Sutherland-Hodgman clip of a polygon against the half-space normal . p >= 0."""
    out = []
    n = len(poly)
    for a_i in range(n):
        a, b = poly[a_i], poly[(a_i + 1) % n]
        da, db = normal @ a, normal @ b
        if da >= 0:
            out.append(a)
        if (da >= 0) != (db >= 0):
            out.append(a + (b - a) * (da / (da - db)))
    return out


def warp_triangles(triangles):
    """Warp world triangles (m, 3, 3) into E_ref, splitting at quadrant seams.

    Returns ``(owner, warped)``: for each output triangle the index of its
    source triangle and its (3, 2) reference-space vertices.
    """
    triangles = np.asarray(triangles, dtype=float).reshape(-1, 3, 3)
    x, y = triangles[..., 0], triangles[..., 1]
    whole = np.full(len(triangles), -1)
    for k, (sx, sy) in enumerate(_QUADRANT_SIGNS):
        inside = np.all(sx * x >= 0, axis=1) & np.all(sy * y >= 0, axis=1) & (whole < 0)
        whole[inside] = k
    owners, pieces = [], []
    simple = np.flatnonzero(whole >= 0)
    if simple.size:
        mapped = np.empty((simple.size, 3, 2))
        for k in range(4):
            sel = whole[simple] == k
            if np.any(sel):
                mapped[sel] = sphere_map_in_quadrant(triangles[simple[sel]], k)
        owners.append(simple)
        pieces.append(mapped)
    split_owner, split_tris = [], []
    for t in np.flatnonzero(whole < 0):
        for k, (sx, sy) in enumerate(_QUADRANT_SIGNS):
            poly = _clip(list(triangles[t]), np.array([sx, 0.0, 0.0]))
            if len(poly) >= 3:
                poly = _clip(poly, np.array([0.0, sy, 0.0]))
            if len(poly) < 3:
                continue
            mapped = sphere_map_in_quadrant(np.array(poly), k)
            for v in range(1, len(mapped) - 1):
                split_owner.append(t)
                split_tris.append(mapped[[0, v, v + 1]])
    if split_tris:
        owners.append(np.asarray(split_owner))
        pieces.append(np.asarray(split_tris))
    if not pieces:
        return np.zeros(0, dtype=int), np.zeros((0, 3, 2))
    return np.concatenate(owners), np.concatenate(pieces)


def rasterize(owner, warped, n_owners: int, resolution: int):
    """Cells whose centers fall inside any triangle of each owner.

    Returns a binary CSR matrix (n_owners x R*R); a cell covered by several
    triangles of the same owner counts once.
    """
    warped = np.asarray(warped, dtype=float)
    owner = np.asarray(owner, dtype=int)
    # continuous cell coordinates; cell centers sit at half-integers
    uv = (warped + 1.0) * 0.5 * resolution
    a, b, c = uv[:, 0], uv[:, 1], uv[:, 2]
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    flip = area < 0
    b, c = np.where(flip[:, None], c, b), np.where(flip[:, None], b, c)
    keep = np.abs(area) > 0
    a, b, c, owner_k = a[keep], b[keep], c[keep], owner[keep]
    lo = np.minimum(np.minimum(a, b), c)
    hi = np.maximum(np.maximum(a, b), c)
    j0 = np.clip(np.ceil(lo[:, 0] - 0.5), 0, resolution - 1).astype(int)
    j1 = np.clip(np.floor(hi[:, 0] - 0.5), 0, resolution - 1).astype(int)
    i0 = np.clip(np.ceil(lo[:, 1] - 0.5), 0, resolution - 1).astype(int)
    i1 = np.clip(np.floor(hi[:, 1] - 0.5), 0, resolution - 1).astype(int)
    nx = np.maximum(j1 - j0 + 1, 0)
    ny = np.maximum(i1 - i0 + 1, 0)
    # bounding boxes that collapse after clipping/ceil-floor contain no center
    nx = np.where((hi[:, 0] - 0.5 < 0) | (lo[:, 0] - 0.5 > resolution - 1), 0, nx)
    ny = np.where((hi[:, 1] - 0.5 < 0) | (lo[:, 1] - 0.5 > resolution - 1), 0, ny)
    counts = nx * ny
    tri_id = np.repeat(np.arange(len(counts)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    jj = j0[tri_id] + local % np.maximum(nx[tri_id], 1)
    ii = i0[tri_id] + local // np.maximum(nx[tri_id], 1)
    px, py = jj + 0.5, ii + 0.5
    tol = -1e-9

    def edge(p, q):
        return (q[tri_id, 0] - p[tri_id, 0]) * (py - p[tri_id, 1]) - (q[tri_id, 1] - p[tri_id, 1]) * (px - p[tri_id, 0])

    inside = (edge(a, b) >= tol) & (edge(b, c) >= tol) & (edge(c, a) >= tol)
    rows = owner_k[tri_id[inside]]
    cells = ii[inside] * resolution + jj[inside]
    key = np.unique(rows.astype(np.int64) * resolution * resolution + cells)
    r, col = np.divmod(key, resolution * resolution)
    return sparse.csr_matrix((np.ones(len(key)), (r, col)), shape=(n_owners, resolution * resolution))


def compute_footprints(camera: Camera, depth, opacity, resolution: int,
                       o_th: float = DEFAULT_OPACITY_THRESHOLD, keep_triangles: bool = False) -> Footprints:
    pixels, tris, clamped = triangulate_and_project(camera, depth, opacity, o_th)
    n = len(pixels)
    owner, warped = warp_triangles(tris.reshape(-1, 3, 3))
    pixel_of = owner // 2
    matrix = rasterize(pixel_of, warped, n, resolution)
    counts = np.diff(matrix.indptr)
    empty_rows = np.flatnonzero(counts == 0)
    if empty_rows.size:
        # sub-cell footprint: use the cell under the centroid of its warped pieces
        sums = np.zeros((n, 2))
        np.add.at(sums, pixel_of, warped.mean(axis=1))
        cnt = np.bincount(pixel_of, minlength=n)
        centroid = sums[empty_rows] / cnt[empty_rows, None]
        idx = np.clip(np.floor((centroid + 1.0) * 0.5 * resolution).astype(int), 0, resolution - 1)
        extra = sparse.csr_matrix(
            (np.ones(empty_rows.size), (empty_rows, idx[:, 1] * resolution + idx[:, 0])),
            shape=matrix.shape,
        )
        matrix = (matrix + extra).tocsr()
    matrix.sort_indices()
    per_pixel = []
    if keep_triangles:
        per_pixel = [[] for _ in range(n)]
        for o, tri in zip(pixel_of, warped):
            per_pixel[o].append(tri)
    return Footprints((camera.height, camera.width), resolution, pixels, matrix, tris,
                      per_pixel, clamped, int(empty_rows.size))


@lru_cache(maxsize=256)
def view_footprints(camera: Camera, resolution: int, o_th: float = DEFAULT_OPACITY_THRESHOLD,
                    empty: bool = False) -> Footprints:
    """Cached footprints for the fixed sphere geometry seen from ``camera``."""
    geo = view_geometry(camera, empty)
    return compute_footprints(camera, geo.depth, geo.opacity, resolution, o_th)


def rasterize_aggregate(fp: PixelFootprint, ref: ReferenceNoise) -> np.ndarray:
    """Noise value of one pixel: covered cell values summed and divided by sqrt(count)."""
    if fp.count < 1:
        raise DomainError("a footprint must cover at least one cell")
    cells = ref.grid.reshape(-1, ref.channels)[fp.cells]
    return cells.sum(axis=0) / math.sqrt(fp.count)


def consistent_noise(scene, camera: Camera, ref: ReferenceNoise,
                     o_th: float = DEFAULT_OPACITY_THRESHOLD) -> np.ndarray:
    """Noise image for ``camera``: aggregated reference noise on opaque pixels, background elsewhere."""
    if ref.bg.shape[:2] != (camera.height, camera.width):
        raise DomainError("background noise does not match the camera resolution")
    fps = view_footprints(camera, ref.resolution, o_th, bool(getattr(scene, "empty", False)))
    out = ref.bg.copy().reshape(-1, ref.channels)
    if len(fps.pixels):
        out[fps.pixels] = fps.aggregate(ref.grid)
    return out.reshape(camera.height, camera.width, ref.channels)


def bilinear_sample(grid: np.ndarray, coords) -> np.ndarray:
    idx, w = bilinear_weights(coords, grid.shape[0])
    flat = grid.reshape(-1, grid.shape[-1])
    return np.einsum("...k,...kc->...c", w, flat[idx])


def bilinear_noise(scene, camera: Camera, ref: ReferenceNoise,
                   o_th: float = DEFAULT_OPACITY_THRESHOLD) -> np.ndarray:
    """Ablation: bilinear interpolation of the reference grid at warped pixel centers.

    Interpolation averages neighboring cells, so per-pixel variance drops below one.
    """
    geo = view_geometry(camera, bool(getattr(scene, "empty", False)))
    out = ref.bg.copy()
    mask = geo.opacity > o_th
    if np.any(mask):
        out[mask] = bilinear_sample(ref.grid, sphere_map(geo.hits[mask]))
    return out


def corresponding_pixels(cam_a: Camera, cam_b: Camera, o_th: float = DEFAULT_OPACITY_THRESHOLD):
    """Pixel pairs (flat_a, flat_b, offset) seeing the same surface point.

    The center hit of each opaque pixel of ``cam_a`` is reprojected into
    ``cam_b``; pairs are kept when the point is visible (front-facing) there.
    ``offset`` is the distance in pixels between the reprojection and the
    center of the receiving pixel.
    """
    geo_a, geo_b = view_geometry(cam_a), view_geometry(cam_b)
    flat_a = np.flatnonzero(geo_a.opacity.ravel() > o_th)
    pts = geo_a.hits.reshape(-1, 3)[flat_a]
    rows, cols, _ = cam_b.project(pts)
    facing = np.einsum("ij,ij->i", pts, cam_b.position - pts) > 0
    inside = (rows >= 0) & (rows < cam_b.height) & (cols >= 0) & (cols < cam_b.width) & facing
    r, c = np.floor(rows[inside]).astype(int), np.floor(cols[inside]).astype(int)
    flat_b = r * cam_b.width + c
    ok = geo_b.opacity.ravel()[flat_b] > o_th
    offset = np.hypot(rows[inside] - (r + 0.5), cols[inside] - (c + 0.5))
    return flat_a[inside][ok], flat_b[ok], offset[ok]
