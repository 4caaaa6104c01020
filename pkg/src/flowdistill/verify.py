"""Statistical checks and independent numerical oracles.

The oracles here are deliberately written in the noisy variable x_t, not the
clean variable, so agreement with the samplers module is a real cross-check.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DomainError
from .schedule import BetaSchedule, Schedule
from .samplers import CleanState, clean_sde_step, time_grid

MIN_SAMPLES = 100


@dataclass
class MomentReport:
    count: int
    mean: float
    var: float
    min: float
    max: float
    mean_bound: float
    var_interval: tuple
    passed: bool

    def to_dict(self) -> dict:
        d = asdict(self)
        d["var_interval"] = list(self.var_interval)
        # three standard errors of the mean for unit-variance data
        d["mean_standard_error_bound"] = 3.0 / math.sqrt(self.count)
        return d


def moment_check(samples, mean_bound: float, var_interval) -> MomentReport:
    """Pass iff |sample mean| <= mean_bound and the sample variance lies in var_interval."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < MIN_SAMPLES:
        raise DomainError(f"need at least {MIN_SAMPLES} samples, got {x.size}")
    lo, hi = var_interval
    mean, var = float(x.mean()), float(x.var())
    passed = abs(mean) <= mean_bound and lo <= var <= hi
    return MomentReport(x.size, mean, var, float(x.min()), float(x.max()), mean_bound, (lo, hi), passed)


def correlation(a, b) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size != b.size:
        raise DomainError("correlation needs equal-length inputs")
    if a.size < MIN_SAMPLES:
        raise DomainError(f"need at least {MIN_SAMPLES} samples, got {a.size}")
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DomainError("correlation is undefined for zero-variance input")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def ddim_sample(teacher, x_T, ts, schedule: Schedule | None = None) -> np.ndarray:
    """Deterministic DDIM in its textbook form: predict x0, then re-noise with the predicted eps."""
    s = teacher.schedule if schedule is None else schedule
    x = np.asarray(x_T, dtype=float)
    for t, t_next in zip(ts[:-1], ts[1:]):
        a, sg = s.alpha_sigma(t)
        a_n, sg_n = s.alpha_sigma(t_next)
        eps = teacher.eps_pred(x, t)
        x0 = (x - sg * eps) / a
        x = a_n * x0 + sg_n * eps
    return x


def heun_edm(denoiser, x_T, ts) -> np.ndarray:
    """Deterministic second-order Heun solver of dx/dt = (x - D(x, t)) / t (alpha = 1, sigma = t)."""
    x = np.asarray(x_T, dtype=float)
    for t, t_next in zip(ts[:-1], ts[1:]):
        d = (x - denoiser(x, t)) / t
        x_next = x + (t_next - t) * d
        if t_next > 0:
            d2 = (x_next - denoiser(x_next, t_next)) / t_next
            x_next = x + (t_next - t) * 0.5 * (d + d2)
        x = x_next
    return x


def edm_stochastic_noisy(denoiser, ts, gammas, rng: np.random.Generator, shape, s_noise: float = 1.0) -> np.ndarray:
    """Stochastic churn sampler in the noisy variable.

    Random draws happen in the same order as the clean-variable sampler: the
    initial noise first, then one standard-normal array per step.
    """
    x = ts[0] * rng.standard_normal(shape)
    for i, (t, t_next) in enumerate(zip(ts[:-1], ts[1:])):
        eps = s_noise * rng.standard_normal(shape)
        t_hat = t * (1.0 + gammas[i])
        x_hat = x + math.sqrt(max(t_hat**2 - t**2, 0.0)) * eps
        d = (x_hat - denoiser(x_hat, t_hat)) / t_hat
        x = x_hat + (t_next - t_hat) * d
        if t_next != 0:
            d2 = (x - denoiser(x, t_next)) / t_next
            x = x_hat + (t_next - t_hat) * 0.5 * (d + d2)
    return x


def _noisy_sde_step(teacher, s: Schedule, beta: BetaSchedule, x, t, t_next, noise):
    """Euler-Maruyama for the reverse diffusion SDE written in y = x / alpha."""
    h = t_next - t
    a, _ = s.alpha_sigma(t)
    a_n, _ = s.alpha_sigma(t_next)
    r = s.ratio(t)
    b = beta.beta(t, s)
    drift = (s.ratio(t_next) - r + r * b * h) * teacher.eps_pred(x, t)
    diffusion = math.sqrt(2.0 * b * abs(h)) * r * noise
    return a_n * (x / a + drift + diffusion)


def pathwise_sde_gap(teacher, schedule: Schedule | None = None, beta: BetaSchedule | None = None,
                     n_steps: int = 500, seed: int = 0) -> float:
    """Endpoint L2 gap between the clean-variable SDE and the noisy-variable SDE.

    Both integrators share the initial noise and every Gaussian increment; the
    clean endpoint is mapped back to x = alpha x_c + sigma eps~ before comparing.
    """
    if n_steps < 8:
        raise DomainError("pathwise comparison needs at least 8 steps")
    s = teacher.schedule if schedule is None else schedule
    beta = BetaSchedule.zero() if beta is None else beta
    ts = time_grid(s, n_steps)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(teacher.shape)
    clean = CleanState(ts[0], np.zeros_like(eps), eps)
    x = clean.noisy(s)
    for t, t_next in zip(ts[:-1], ts[1:]):
        noise = rng.standard_normal(eps.shape)
        x = _noisy_sde_step(teacher, s, beta, x, t, t_next, noise)
        clean = clean_sde_step(clean, t_next, teacher, beta, rng, s, noise=noise)
    return float(np.linalg.norm(clean.noisy(s) - x))
