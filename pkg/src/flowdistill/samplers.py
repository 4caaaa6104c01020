"""Noisy-variable and clean-variable diffusion samplers.

The clean variable x_c = (x_t - sigma_t eps~) / alpha_t carries the same
trajectory as the probability-flow ODE once eps~ is split off.  All step
functions here are pure; the numpy Generator passed in is the only mutable
input and belongs to the caller's trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, UnsupportedConfigurationError
from .schedule import BetaSchedule, Schedule, gamma_between


@dataclass
class NoisyState:
    t: float
    x: np.ndarray


@dataclass
class CleanState:
    t: float
    x_clean: np.ndarray
    eps_carry: np.ndarray

    @classmethod
    def initial(cls, eps: np.ndarray, schedule: Schedule) -> "CleanState":
        eps = np.asarray(eps, dtype=float)
        return cls(schedule.T, np.zeros_like(eps), eps)

    def noisy(self, schedule: Schedule) -> np.ndarray:
        alpha, sigma = schedule.alpha_sigma(self.t)
        return alpha * self.x_clean + sigma * self.eps_carry


@dataclass
class TimeGrid:
    """Decreasing times t_0 > ... > t_N with per-step churn for the EDM-style sampler."""

    ts: np.ndarray
    gammas: np.ndarray = None
    s_noise: float = 1.0

    def __post_init__(self):
        self.ts = np.asarray(self.ts, dtype=float)
        if self.gammas is None:
            self.gammas = np.zeros(len(self.ts) - 1)
        self.gammas = np.broadcast_to(np.asarray(self.gammas, dtype=float), (len(self.ts) - 1,)).copy()
        if self.ts.ndim != 1 or len(self.ts) < 2:
            raise DomainError("a time grid needs at least two points")
        if np.any(np.diff(self.ts) >= 0):
            raise DomainError("time grid must be strictly decreasing")
        if np.any(self.gammas < 0) or np.any(self.gammas >= 1):
            raise DomainError("per-step churn must lie in [0, 1)")

    @classmethod
    def karras(cls, n: int, t_min: float, t_max: float, rho: float = 7.0, gamma=0.0,
               s_noise: float = 1.0, append_zero: bool = True) -> "TimeGrid":
        ts = karras_times(n, t_min, t_max, rho)
        if append_zero:
            ts = np.append(ts, 0.0)
        return cls(ts, gamma, s_noise)

    @property
    def n_steps(self) -> int:
        return len(self.ts) - 1


def karras_times(n: int, t_min: float, t_max: float, rho: float = 7.0) -> np.ndarray:
    """n points from t_max down to t_min, equally spaced in t^(1/rho)."""
    ramp = np.linspace(0.0, 1.0, n)
    lo, hi = t_min ** (1 / rho), t_max ** (1 / rho)
    ts = (hi + ramp * (lo - hi)) ** rho
    ts[0], ts[-1] = t_max, t_min
    return ts


def time_grid(schedule: Schedule, n_steps: int, spacing: str = "uniform", rho: float = 7.0) -> np.ndarray:
    """n_steps + 1 decreasing times from T to t_s."""
    if n_steps < 1:
        raise DomainError("need at least one step")
    if spacing == "uniform":
        ts = np.linspace(schedule.T, schedule.t_s, n_steps + 1)
    elif spacing == "karras":
        ts = karras_times(n_steps + 1, schedule.t_s, schedule.T, rho)
    else:
        raise DomainError(f"unknown spacing {spacing!r}")
    ts[0], ts[-1] = schedule.T, schedule.t_s
    return ts


def _schedule(teacher, schedule):
    return teacher.schedule if schedule is None else schedule


def _check_step(t, t_next):
    if not t_next < t:
        raise DomainError(f"reverse-time step needs t_next < t, got {t_next} >= {t}")


def forward_diffuse(x0, eps, schedule: Schedule, t: float) -> NoisyState:
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if x0.shape != eps.shape:
        raise DomainError(f"shape mismatch {x0.shape} vs {eps.shape}")
    alpha, sigma = schedule.alpha_sigma(t)
    return NoisyState(t, alpha * x0 + sigma * eps)


def pf_ode_step(state: NoisyState, t_next: float, teacher, schedule: Schedule | None = None,
                y=None, w=None) -> NoisyState:
    """Euler step of d(x/alpha) = d(sigma/alpha) * eps."""
    s = _schedule(teacher, schedule)
    _check_step(state.t, t_next)
    alpha, _ = s.alpha_sigma(state.t)
    alpha_next, _ = s.alpha_sigma(t_next)
    eps = teacher.eps_guided(state.x, state.t, y, w)
    dr = s.ratio(t_next) - s.ratio(state.t)
    return NoisyState(t_next, alpha_next * (state.x / alpha + dr * eps))


def _clean_residual(teacher, s, x_clean, eps_carry, t, y, w):
    alpha, sigma = s.alpha_sigma(t)
    return teacher.eps_guided(alpha * x_clean + sigma * eps_carry, t, y, w) - eps_carry


def clean_ode_step(state: CleanState, t_next: float, teacher, schedule: Schedule | None = None,
                   y=None, w=None, method: str = "euler") -> CleanState:
    """One step of dx_c = d(sigma/alpha) * (eps(alpha x_c + sigma eps~) - eps~); eps~ is held fixed."""
    s = _schedule(teacher, schedule)
    _check_step(state.t, t_next)
    dr = s.ratio(t_next) - s.ratio(state.t)
    k1 = _clean_residual(teacher, s, state.x_clean, state.eps_carry, state.t, y, w)
    x_next = state.x_clean + dr * k1
    if method == "heun":
        k2 = _clean_residual(teacher, s, x_next, state.eps_carry, t_next, y, w)
        x_next = state.x_clean + dr * (0.5 * k1 + 0.5 * k2)
    elif method != "euler":
        raise DomainError(f"unknown integrator {method!r}")
    return CleanState(t_next, x_next, state.eps_carry)


def clean_sde_step(state: CleanState, t_next: float, teacher, beta: BetaSchedule,
                   rng: np.random.Generator, schedule: Schedule | None = None, y=None, w=None,
                   noise: np.ndarray | None = None) -> CleanState:
    """Euler step of the clean-flow SDE with an exact OU transition for eps~.

    ``noise`` optionally supplies the standard-normal draw used for the OU
    refresh (the equivalence harness shares it with a noisy-variable SDE).
    """
    s = _schedule(teacher, schedule)
    _check_step(state.t, t_next)
    h = t_next - state.t
    r = s.ratio(state.t)
    lr = (s.ratio(t_next) - r) + r * beta.beta(state.t, s) * h
    residual = _clean_residual(teacher, s, state.x_clean, state.eps_carry, state.t, y, w)
    x_next = state.x_clean + lr * residual
    gamma = gamma_between(beta, t_next, state.t, s)
    if gamma == 0.0:
        eps_next = state.eps_carry
    else:
        if noise is None:
            noise = rng.standard_normal(state.eps_carry.shape)
        eps_next = math.sqrt(1.0 - gamma) * state.eps_carry + math.sqrt(gamma) * noise
    return CleanState(t_next, x_next, eps_next)


def noise_refresh(eps, gamma: float, rng: np.random.Generator) -> np.ndarray:
    """sqrt(1 - gamma) * eps + sqrt(gamma) * fresh; gamma = 1 is a full redraw."""
    if not 0.0 <= gamma <= 1.0:
        raise DomainError(f"gamma must lie in [0, 1], got {gamma}")
    eps = np.asarray(eps, dtype=float)
    if gamma == 0.0:
        return eps.copy()
    return math.sqrt(1.0 - gamma) * eps + math.sqrt(gamma) * rng.standard_normal(eps.shape)


def edm_stochastic_sample(denoiser, grid: TimeGrid, rng: np.random.Generator, shape,
                          schedule: Schedule | None = None) -> np.ndarray:
    """Stochastic second-order sampler written in the clean variable.

    ``denoiser(x, t)`` returns the sample prediction.  Each step churns the
    time up to t_hat = (1 + gamma_i) t_i, mixes fresh noise into eps~ with
    ratio t_i / t_hat, takes an Euler step and applies a Heun correction
    unless the next time is zero.
    """
    if schedule is not None and schedule.kind != "edm":
        raise UnsupportedConfigurationError("the stochastic sampler assumes alpha = 1, sigma = t")
    eps = rng.standard_normal(shape)
    x = np.zeros(shape)
    ts = grid.ts
    for i in range(grid.n_steps):
        noise = grid.s_noise * rng.standard_normal(shape)
        t, t_next = ts[i], ts[i + 1]
        t_hat = t + grid.gammas[i] * t
        ratio = t / t_hat
        eps = ratio * eps + math.sqrt(1.0 - ratio**2) * noise
        denoised = denoiser(x + t_hat * eps, t_hat)
        if t_next == 0:
            # x + (0 - t_hat) * (x - D) / t_hat lands on D exactly
            x = denoised
            continue
        d = (x - denoised) / t_hat
        x_euler = x + (t_next - t_hat) * d
        d_prime = (x_euler - denoiser(x_euler + t_next * eps, t_next)) / t_next
        x = x + (t_next - t_hat) * (0.5 * d + 0.5 * d_prime)
    return x


@dataclass
class TrajectoryRecord:
    step: int
    t: float
    norm_clean: float
    norm_eps: float
    norm_noisy: float


@dataclass
class Trajectory:
    final: CleanState
    records: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)


def run_clean(teacher, eps, ts, beta: BetaSchedule | None = None, rng=None, y=None, w=None,
              method: str = "euler", record: bool = False, snapshot_steps=(),
              schedule: Schedule | None = None, x_clean=None) -> Trajectory:
    """Integrate the clean flow (ODE when beta is None or zero) along ``ts``."""
    s = _schedule(teacher, schedule)
    state = CleanState(float(ts[0]), np.zeros_like(eps, dtype=float) if x_clean is None else np.asarray(x_clean, float),
                       np.asarray(eps, dtype=float))
    stochastic = beta is not None and beta.kind != "zero"
    if stochastic and method != "euler":
        raise DomainError("the SDE stepper is first order only")
    out = Trajectory(state)
    snapshot_steps = set(snapshot_steps)

    def log(step, st):
        if record:
            out.records.append(TrajectoryRecord(
                step, st.t, float(np.linalg.norm(st.x_clean)), float(np.linalg.norm(st.eps_carry)),
                float(np.linalg.norm(st.noisy(s)))))
        if step in snapshot_steps:
            out.snapshots[step] = st.x_clean.copy()

    log(0, state)
    for i, t_next in enumerate(ts[1:], start=1):
        if stochastic:
            state = clean_sde_step(state, float(t_next), teacher, beta, rng, s, y, w)
        else:
            state = clean_ode_step(state, float(t_next), teacher, s, y, w, method)
        log(i, state)
    out.final = state
    return out


def run_pf_ode(teacher, x_T, ts, y=None, w=None, schedule: Schedule | None = None) -> NoisyState:
    state = NoisyState(float(ts[0]), np.asarray(x_T, dtype=float))
    for t_next in ts[1:]:
        state = pf_ode_step(state, float(t_next), teacher, schedule, y, w)
    return state
