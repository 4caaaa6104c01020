"""Toy differentiable renderer: a fixed unit sphere with a learnable texture.

The texture is a T x T grid over the same equal-area square used by the noise
reference space.  Because the geometry never moves, the rendered color is an
exact linear function of the texels, and the Jacobian is a sparse matrix with
at most four bilinear weights per opaque pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import sparse

from .errors import DomainError
from .geometry import Camera, bilinear_weights, intersect_unit_sphere, sphere_map


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray


@dataclass(frozen=True)
class _Geometry:
    depth: np.ndarray
    opacity: np.ndarray
    hits: np.ndarray


@lru_cache(maxsize=512)
def view_geometry(camera: Camera, empty: bool = False) -> _Geometry:
    """Per-pixel depth, binary opacity and world hit points for a camera."""
    depth, hit, points = intersect_unit_sphere(camera.position, camera.pixel_directions())
    if empty:
        hit = np.zeros_like(hit)
        depth = np.full_like(depth, np.inf)
    for arr in (depth, hit, points):
        arr.setflags(write=False)
    return _Geometry(depth, hit.astype(float), points)


@lru_cache(maxsize=512)
def _texel_matrix(camera: Camera, resolution: int, empty: bool) -> sparse.csr_matrix:
    geo = view_geometry(camera, empty)
    n_pix = camera.height * camera.width
    opaque = np.flatnonzero(geo.opacity.ravel() > 0)
    if opaque.size == 0:
        return sparse.csr_matrix((n_pix, resolution * resolution))
    coords = sphere_map(geo.hits.reshape(-1, 3)[opaque])
    idx, w = bilinear_weights(coords, resolution)
    rows = np.repeat(opaque, 4)
    m = sparse.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(n_pix, resolution * resolution))
    m.sum_duplicates()
    return m


@dataclass
class SphereScene:
    """Unit sphere whose color comes from a learnable texel grid."""

    texture: np.ndarray
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    empty: bool = False

    def __post_init__(self):
        self.texture = np.asarray(self.texture, dtype=float)
        if self.texture.ndim != 3 or self.texture.shape[0] != self.texture.shape[1]:
            raise DomainError("texture must have shape (T, T, C)")
        self.background = np.broadcast_to(np.asarray(self.background, dtype=float), (self.channels,)).copy()

    @classmethod
    def uniform(cls, resolution: int = 64, channels: int = 3, value: float = 0.0, background=0.0) -> "SphereScene":
        return cls(np.full((resolution, resolution, channels), float(value)), np.full(channels, float(background)))

    @property
    def channels(self) -> int:
        return self.texture.shape[-1]

    @property
    def params(self) -> np.ndarray:
        return self.texture

    def copy(self) -> "SphereScene":
        return SphereScene(self.texture.copy(), self.background.copy(), self.empty)

    def jacobian(self, camera: Camera) -> sparse.csr_matrix:
        """d color / d texture as a (H*W) x (T*T) matrix shared by every channel."""
        return _texel_matrix(camera, self.texture.shape[0], self.empty)

    def render(self, camera: Camera) -> RenderOutput:
        geo = view_geometry(camera, self.empty)
        flat = self.jacobian(camera) @ self.texture.reshape(-1, self.channels)
        color = flat.reshape(camera.height, camera.width, self.channels)
        color = np.where(geo.opacity[..., None] > 0, color, self.background)
        return RenderOutput(color, geo.depth, geo.opacity)

    def render_vjp(self, camera: Camera, grad_image) -> np.ndarray:
        grad_image = np.asarray(grad_image, dtype=float)
        expected = (camera.height, camera.width, self.channels)
        if grad_image.shape != expected:
            raise DomainError(f"gradient image shape {grad_image.shape} != {expected}")
        g = self.jacobian(camera).T @ grad_image.reshape(-1, self.channels)
        return np.asarray(g).reshape(self.texture.shape)


@dataclass
class PixelScene:
    """View-locked scene whose parameters are the rendered pixels of one camera.

    The Jacobian is the identity, so one optimization step on this scene is
    exactly one step on the image itself.  Depth and opacity still come from the
    sphere so the consistent noise is rendered as usual.
    """

    image: np.ndarray
    camera: Camera

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=float)
        if self.image.shape[:2] != (self.camera.height, self.camera.width):
            raise DomainError("image does not match the camera resolution")

    @property
    def params(self) -> np.ndarray:
        return self.image

    @property
    def channels(self) -> int:
        return self.image.shape[-1]

    empty = False

    def copy(self) -> "PixelScene":
        return PixelScene(self.image.copy(), self.camera)

    def _check(self, camera):
        if camera != self.camera:
            raise DomainError("a PixelScene can only be rendered from its own camera")

    def render(self, camera: Camera) -> RenderOutput:
        self._check(camera)
        geo = view_geometry(camera)
        return RenderOutput(self.image.copy(), geo.depth, geo.opacity)

    def render_vjp(self, camera: Camera, grad_image) -> np.ndarray:
        self._check(camera)
        grad_image = np.asarray(grad_image, dtype=float)
        if grad_image.shape != self.image.shape:
            raise DomainError(f"gradient image shape {grad_image.shape} != {self.image.shape}")
        return grad_image.copy()


def render(scene, camera: Camera) -> RenderOutput:
    return scene.render(camera)


def render_vjp(scene, camera: Camera, grad_image) -> np.ndarray:
    return scene.render_vjp(camera, grad_image)
