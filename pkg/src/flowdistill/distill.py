"""Distillation loop: consistent-flow gradients, the SDS baseline and the variance metric.

Each step renders one camera, builds the carried noise eps~ for that view,
forms x_t = alpha g + sigma eps~ and pushes the residual eps_phi(x_t) - eps~
back onto the texture through the renderer adjoint.  eps~ is treated as a
constant input (no gradient flows through it).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DistillationError, DomainError, UnsupportedConfigurationError
from .geometry import Camera
from .noise_transport import DEFAULT_OPACITY_THRESHOLD, ReferenceNoise, bilinear_noise, consistent_noise
from .samplers import noise_refresh
from .schedule import AnnealSpec

NOISE_MODES = ("consistent", "random", "bilinear")
OPTIMIZERS = ("sgd", "adam", "flow")
TIMESTEP_MODES = ("anneal", "random")


@dataclass(frozen=True)
class CameraOrbit:
    """Discrete orbit: ``azimuth_count`` evenly spaced azimuths at each elevation."""

    radius: float = 2.5
    elevation_range: tuple = (0.0, 30.0)
    elevation_count: int = 3
    azimuth_count: int = 24
    fov: float = 40.0
    height: int = 32
    width: int = 32

    def __post_init__(self):
        if self.elevation_count < 1 or self.azimuth_count < 1:
            raise DomainError("orbit needs at least one elevation and one azimuth")
        object.__setattr__(self, "elevation_range", tuple(float(v) for v in self.elevation_range))

    def cameras(self) -> list:
        lo, hi = self.elevation_range
        elevations = [lo] if self.elevation_count == 1 else np.linspace(lo, hi, self.elevation_count)
        azimuths = np.arange(self.azimuth_count) * 360.0 / self.azimuth_count
        return [Camera(self.radius, float(e), float(a), self.fov, self.height, self.width)
                for e in elevations for a in azimuths]

    def sample(self, rng: np.random.Generator) -> Camera:
        cams = self.cameras()
        return cams[int(rng.integers(len(cams)))]


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adam"
    lr: float = 1e-2
    lr_final: float | None = None
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise DomainError(f"optimizer must be one of {OPTIMIZERS}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise DomainError("moment decay rates must lie in (0, 1)")

    def rate(self, tau: int, steps: int) -> float:
        """Learning rate at step ``tau``; decays linearly to ``lr_final`` when set."""
        if self.lr_final is None or steps <= 1:
            return self.lr
        return self.lr + (self.lr_final - self.lr) * tau / (steps - 1)


@dataclass
class OptimizerMoments:
    """Gradient EMAs with Adam-style bias correction."""

    m: np.ndarray
    v: np.ndarray
    beta1: float = 0.9
    beta2: float = 0.99
    count: int = 0

    @classmethod
    def zeros(cls, shape, beta1: float = 0.9, beta2: float = 0.99) -> "OptimizerMoments":
        if not (0 < beta1 < 1 and 0 < beta2 < 1):
            raise DomainError("moment decay rates must lie in (0, 1)")
        return cls(np.zeros(shape), np.zeros(shape), beta1, beta2)

    def update(self, grad) -> None:
        grad = np.asarray(grad, dtype=float)
        if grad.shape != self.m.shape:
            raise DomainError(f"gradient shape {grad.shape} != {self.m.shape}")
        self.count += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2

    @property
    def m_hat(self) -> np.ndarray:
        return self.m if self.count == 0 else self.m / (1 - self.beta1**self.count)

    @property
    def v_hat(self) -> np.ndarray:
        return self.v if self.count == 0 else self.v / (1 - self.beta2**self.count)


def grad_variance_metric(moments: OptimizerMoments) -> float:
    """sqrt(sum(v_hat - m_hat^2) / sum(v_hat)) with negative entries clamped to zero."""
    v, m = moments.v_hat, moments.m_hat
    total = float(np.sum(v))
    if total <= 0:
        raise DomainError("the variance metric is undefined when every second moment is zero")
    return math.sqrt(float(np.sum(np.maximum(v - m**2, 0.0))) / total)


@dataclass
class DistillConfig:
    anneal: AnnealSpec
    gamma: float = 1e-4
    guidance: float | None = None
    condition: str | None = None
    orbit: CameraOrbit = field(default_factory=CameraOrbit)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    noise_mode: str = "consistent"
    timesteps: str = "anneal"
    steps: int | None = None
    seed: int = 0
    noise_resolution: int = 512
    opacity_threshold: float = DEFAULT_OPACITY_THRESHOLD
    snapshot_every: int = 0
    keep_noise: bool = False

    def __post_init__(self):
        if self.steps is None:
            self.steps = self.anneal.total_steps
        if self.steps < 0:
            raise DomainError("steps must be >= 0")
        if self.steps > self.anneal.total_steps:
            raise DomainError("steps exceed the annealing horizon")
        if self.noise_mode not in NOISE_MODES:
            raise DomainError(f"noise_mode must be one of {NOISE_MODES}")
        if self.timesteps not in TIMESTEP_MODES:
            raise DomainError(f"timesteps must be one of {TIMESTEP_MODES}")
        if not 0.0 <= self.gamma <= 1.0:
            raise DomainError("gamma must lie in [0, 1]")
        if self.gamma == 1.0 and self.noise_mode != "random":
            raise UnsupportedConfigurationError("gamma = 1 is only defined for the random noise mode")
        if self.optimizer.kind == "flow" and self.timesteps != "anneal":
            raise UnsupportedConfigurationError("the flow optimizer needs an annealed timestep schedule")

    def timestep(self, tau: int, rng: np.random.Generator) -> float:
        if self.timesteps == "random":
            return float(rng.uniform(self.anneal.t_min, self.anneal.t_max))
        return self.anneal(tau)


@dataclass
class GradientSample:
    grad: np.ndarray
    t: float
    noise: np.ndarray
    residual: np.ndarray


def _residual_gradient(scene, camera, teacher, t, noise, y=None, w=None) -> GradientSample:
    color = scene.render(camera).color
    noise = np.asarray(noise, dtype=float)
    if noise.shape != color.shape:
        raise DomainError(f"noise shape {noise.shape} != rendered shape {color.shape}")
    alpha, sigma = teacher.schedule.alpha_sigma(t)
    x_t = alpha * color + sigma * noise
    residual = teacher.eps_guided(x_t, t, y, w) - noise
    return GradientSample(scene.render_vjp(camera, residual), float(t), noise, residual)


def cfd_gradient(scene, camera: Camera, teacher, t: float, ref: ReferenceNoise, w=None, y=None,
                 noise=None, full: bool = False):
    """Consistent-flow gradient for one view; ``noise`` overrides the consistent noise image."""
    if noise is None:
        noise = consistent_noise(scene, camera, ref)
    out = _residual_gradient(scene, camera, teacher, t, noise, y, w)
    return out if full else out.grad


def sds_gradient(scene, camera: Camera, teacher, t_range, rng: np.random.Generator, w=None, y=None,
                 full: bool = False):
    """Baseline gradient: t uniform in ``t_range`` and fresh i.i.d. noise on every call."""
    t_lo, t_hi = t_range
    if t_lo > t_hi:
        raise DomainError("t_range must be (t_min, t_max)")
    t = float(rng.uniform(t_lo, t_hi))
    color_shape = (camera.height, camera.width, teacher.shape[-1])
    out = _residual_gradient(scene, camera, teacher, t, rng.standard_normal(color_shape), y, w)
    return out if full else out.grad


@dataclass
class StepLog:
    step: int
    t: float
    elevation: float
    azimuth: float
    grad_norm: float
    update_norm: float
    sigma_metric: float


@dataclass
class DistillResult:
    scene: object
    log: list
    moments: OptimizerMoments
    snapshots: dict
    ref: ReferenceNoise | None
    noises: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.scene, self.log))

    @property
    def sigma_metric(self) -> float:
        return grad_variance_metric(self.moments)


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    cam_ss, t_ss, noise_ss, ref_ss = ss.spawn(4)
    return (np.random.default_rng(cam_ss), np.random.default_rng(t_ss), np.random.default_rng(noise_ss),
            int(ref_ss.generate_state(1)[0]))


def distill_run(scene, teacher, cfg: DistillConfig, callback: Callable | None = None) -> DistillResult:
    """Optimize ``scene`` (in place on a copy) against ``teacher``; returns the final scene and logs."""
    scene = scene.copy()
    params = scene.params
    cam_rng, t_rng, noise_rng, ref_seed = _streams(cfg.seed)
    orbit = cfg.orbit
    channels = teacher.shape[-1]
    if teacher.shape != (orbit.height, orbit.width, channels):
        raise DomainError(f"teacher shape {teacher.shape} does not match the orbit resolution")
    ref = None
    if cfg.noise_mode != "random":
        ref = ReferenceNoise.create(cfg.noise_resolution, channels, (orbit.height, orbit.width), ref_seed, cfg.gamma)
    pixel_noise = noise_rng.standard_normal((orbit.height, orbit.width, channels))
    opt = cfg.optimizer
    moments = OptimizerMoments.zeros(params.shape, opt.beta1, opt.beta2)
    ratio = teacher.schedule.ratio
    log, snapshots, noises = [], {}, []
    if cfg.snapshot_every:
        snapshots[0] = params.copy()
    for tau in range(cfg.steps):
        camera = getattr(scene, "camera", None) or orbit.sample(cam_rng)
        t = cfg.timestep(tau, t_rng)
        if cfg.noise_mode == "consistent":
            noise = consistent_noise(scene, camera, ref, cfg.opacity_threshold)
        elif cfg.noise_mode == "bilinear":
            noise = bilinear_noise(scene, camera, ref, cfg.opacity_threshold)
        else:
            # tau = 0 uses the initial draw; afterwards eps~ follows the OU refresh
            if tau > 0:
                pixel_noise = noise_refresh(pixel_noise, cfg.gamma, noise_rng)
            noise = pixel_noise
        if cfg.keep_noise:
            noises.append(np.array(noise, copy=True))
        grad = _residual_gradient(scene, camera, teacher, t, noise, cfg.condition, cfg.guidance).grad
        if not np.all(np.isfinite(grad)):
            raise DistillationError(f"non-finite gradient at step {tau} (t={t})", tau, params.copy())
        moments.update(grad)
        if opt.kind == "sgd":
            update = opt.rate(tau, cfg.steps) * grad
        elif opt.kind == "adam":
            update = opt.rate(tau, cfg.steps) * moments.m_hat / (np.sqrt(moments.v_hat) + opt.eps)
        else:
            update = (ratio(t) - ratio(cfg.anneal(tau + 1))) * grad
        params -= update
        if ref is not None and cfg.gamma > 0:
            ref.inject()
        try:
            sigma = grad_variance_metric(moments)
        except DomainError:
            sigma = float("nan")
        entry = StepLog(tau, t, camera.elevation, camera.azimuth, float(np.linalg.norm(grad)),
                        float(np.linalg.norm(update)), sigma)
        log.append(entry)
        if cfg.snapshot_every and (tau + 1) % cfg.snapshot_every == 0:
            snapshots[tau + 1] = params.copy()
        if callback is not None:
            callback(tau, scene, entry)
    return DistillResult(scene, log, moments, snapshots, ref, noises)
