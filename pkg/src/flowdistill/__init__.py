"""Consistent flow distillation at desk scale.

Closed-form Gaussian-mixture teachers, clean-variable diffusion samplers,
multi-view consistent noise on a textured unit sphere and the distillation
loop that ties them together.
"""

from .errors import (
    DegenerateDensityError,
    DistillationError,
    DomainError,
    InvariantError,
    UnsupportedConfigurationError,
)
from .schedule import AnnealSpec, BetaSchedule, Schedule, anneal_timestep, ddpm_gamma_per_step, gamma_between
from .teacher import GaussianMixtureTeacher, cfg_combine, load_teacher
from .samplers import CleanState, NoisyState, TimeGrid, clean_ode_step, clean_sde_step, pf_ode_step, run_clean
from .geometry import Camera, sphere_map
from .renderer import PixelScene, RenderOutput, SphereScene, render, render_vjp
from .noise_transport import ReferenceNoise, bilinear_noise, consistent_noise, rasterize_aggregate
from .distill import (
    CameraOrbit,
    DistillConfig,
    OptimizerMoments,
    OptimizerSpec,
    cfd_gradient,
    distill_run,
    grad_variance_metric,
    sds_gradient,
)

__all__ = [
    "DegenerateDensityError",
    "DistillationError",
    "DomainError",
    "InvariantError",
    "UnsupportedConfigurationError",
    "AnnealSpec",
    "BetaSchedule",
    "Schedule",
    "anneal_timestep",
    "ddpm_gamma_per_step",
    "gamma_between",
    "GaussianMixtureTeacher",
    "cfg_combine",
    "load_teacher",
    "CleanState",
    "NoisyState",
    "TimeGrid",
    "clean_ode_step",
    "clean_sde_step",
    "pf_ode_step",
    "run_clean",
    "Camera",
    "sphere_map",
    "PixelScene",
    "RenderOutput",
    "SphereScene",
    "render",
    "render_vjp",
    "ReferenceNoise",
    "bilinear_noise",
    "consistent_noise",
    "rasterize_aggregate",
    "CameraOrbit",
    "DistillConfig",
    "OptimizerMoments",
    "OptimizerSpec",
    "cfd_gradient",
    "distill_run",
    "grad_variance_metric",
    "sds_gradient",
]

__version__ = "0.1.0"
