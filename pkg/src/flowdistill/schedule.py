"""Diffusion coefficient schedules, noise-injection rates and timestep annealing.

A schedule defines the forward marginal x_t = alpha_t x_0 + sigma_t eps on a
closed time interval [t_s, T].  Every sampler in the package only ever needs
alpha_t, sigma_t and the ratio r_t = sigma_t / alpha_t (with its derivative).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .errors import DomainError, InvariantError

_TIME_TOL = 1e-12


@dataclass(frozen=True)
class Schedule:
    """alpha/sigma coefficients over [t_s, T].

    ``kind`` is one of ``"vp"`` (cosine variance-preserving), ``"edm"``
    (alpha = 1, sigma = t) or ``"table"`` (piecewise-linear coefficient tables).
    Use the ``vp`` / ``edm`` / ``from_table`` constructors.
    """

    kind: str
    t_s: float
    T: float
    alpha_T: float = 0.01
    table: tuple | None = field(default=None, repr=False)

    @classmethod
    def vp(cls, T: float = 1.0, alpha_T: float = 0.01, t_s: float | None = None) -> "Schedule":
        if not 0.0 < alpha_T < 1.0:
            raise DomainError(f"alpha_T must lie in (0, 1), got {alpha_T}")
        if t_s is None:
            t_s = 5e-4 * T
        return cls("vp", float(t_s), float(T), float(alpha_T))

    @classmethod
    def edm(cls, t_s: float = 0.002, T: float = 80.0) -> "Schedule":
        return cls("edm", float(t_s), float(T))

    @classmethod
    def from_ratio(cls, ratio_T: float, T: float = 1.0, t_s: float | None = None) -> "Schedule":
        """Cosine VP schedule whose terminal sigma/alpha equals ``ratio_T``."""
        return cls.vp(T=T, alpha_T=1.0 / math.sqrt(1.0 + ratio_T**2), t_s=t_s)

    @classmethod
    def from_table(cls, ts: Sequence[float], alphas: Sequence[float], sigmas: Sequence[float]) -> "Schedule":
        ts = tuple(float(v) for v in ts)
        alphas = tuple(float(v) for v in alphas)
        sigmas = tuple(float(v) for v in sigmas)
        if not (len(ts) == len(alphas) == len(sigmas) >= 2):
            raise DomainError("coefficient tables must have equal length >= 2")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise DomainError("table times must be strictly increasing")
        return cls("table", ts[0], ts[-1], alphas[-1], (ts, alphas, sigmas))

    @property
    def _angular_rate(self) -> float:
        return math.acos(self.alpha_T) / self.T

    def _check(self, t):
        t = np.asarray(t, dtype=float)
        tol = _TIME_TOL * max(1.0, abs(self.T))
        if np.any(t < self.t_s - tol) or np.any(t > self.T + tol) or np.any(~np.isfinite(t)):
            raise DomainError(f"t outside schedule domain [{self.t_s}, {self.T}]: {t}")
        return t

    def alpha_sigma(self, t):
        t = self._check(t)
        if self.kind == "edm":
            alpha, sigma = np.ones_like(t), t.copy()
        elif self.kind == "vp":
            angle = self._angular_rate * t
            alpha, sigma = np.cos(angle), np.sin(angle)
        elif self.kind == "table":
            ts, a, s = self.table
            alpha, sigma = np.interp(t, ts, a), np.interp(t, ts, s)
        else:
            raise DomainError(f"unknown schedule kind {self.kind!r}")
        if alpha.ndim == 0:
            return float(alpha), float(sigma)
        return alpha, sigma

    def ratio(self, t):
        """sigma_t / alpha_t."""
        if self.kind == "edm":
            t = self._check(t)
            return float(t) if t.ndim == 0 else t.copy()
        if self.kind == "vp":
            t = self._check(t)
            r = np.tan(self._angular_rate * t)
            return float(r) if r.ndim == 0 else r
        alpha, sigma = self.alpha_sigma(t)
        return sigma / alpha

    def ratio_derivative(self, t):
        """d(sigma_t / alpha_t)/dt."""
        t = self._check(t)
        if self.kind == "edm":
            d = np.ones_like(t)
        elif self.kind == "vp":
            c = self._angular_rate
            d = c / np.cos(c * t) ** 2
        else:
            ts, a, s = (np.asarray(v) for v in self.table)
            idx = np.clip(np.searchsorted(ts, t, side="right") - 1, 0, len(ts) - 2)
            dt = ts[idx + 1] - ts[idx]
            da = (a[idx + 1] - a[idx]) / dt
            ds = (s[idx + 1] - s[idx]) / dt
            alpha, sigma = np.interp(t, ts, a), np.interp(t, ts, s)
            d = (ds * alpha - sigma * da) / alpha**2
        return float(d) if np.ndim(d) == 0 else d

    def validate(self, n_probe: int = 2001) -> None:
        """Raise InvariantError unless the schedule satisfies its invariants."""
        ts = np.linspace(self.t_s, self.T, n_probe)
        if self.kind == "table":
            ts = np.union1d(ts, self.table[0])
        alpha, sigma = self.alpha_sigma(ts)
        if np.any(alpha <= 0):
            raise InvariantError("alpha must stay positive on [t_s, T]")
        if self.kind != "edm":
            if abs(alpha[0] - 1.0) > 1e-3 or abs(sigma[0]) > 1e-3:
                raise InvariantError(
                    f"expected alpha(t_s) ~ 1 and sigma(t_s) ~ 0, got ({alpha[0]}, {sigma[0]})"
                )
        r = sigma / alpha
        if not np.all(np.isfinite(r)):
            raise InvariantError("sigma/alpha must be finite")
        if np.any(np.diff(r) <= 0):
            bad = int(np.argmax(np.diff(r) <= 0))
            raise InvariantError(f"sigma/alpha is not strictly increasing near t={ts[bad]:.6g}")


def alpha_sigma(s: Schedule, t):
    return s.alpha_sigma(t)


def snr_ratio(s: Schedule, t):
    return s.ratio(t)


@dataclass(frozen=True)
class BetaSchedule:
    """Noise-injection intensity beta_t of the clean-flow SDE.

    ``ddpm`` uses beta_t = r'_t / r_t with r = sigma/alpha of the schedule passed
    alongside; ``custom`` wraps an arbitrary non-negative callable.
    """

    kind: str = "zero"
    b: float = 0.0
    fn: Callable[[float], float] | None = field(default=None, compare=False, repr=False)

    @classmethod
    def zero(cls) -> "BetaSchedule":
        return cls("zero")

    @classmethod
    def constant(cls, b: float) -> "BetaSchedule":
        if b < 0:
            raise DomainError("beta must be non-negative")
        return cls("constant", float(b))

    @classmethod
    def ddpm(cls) -> "BetaSchedule":
        return cls("ddpm")

    @classmethod
    def custom(cls, fn: Callable[[float], float]) -> "BetaSchedule":
        return cls("custom", fn=fn)

    def beta(self, t, schedule: Schedule | None = None):
        if self.kind == "zero":
            return np.zeros_like(np.asarray(t, dtype=float)) if np.ndim(t) else 0.0
        if self.kind == "constant":
            return np.full_like(np.asarray(t, dtype=float), self.b) if np.ndim(t) else self.b
        if self.kind == "ddpm":
            _need(schedule)
            return schedule.ratio_derivative(t) / schedule.ratio(t)
        if self.kind == "custom":
            return self.fn(t)
        raise DomainError(f"unknown beta kind {self.kind!r}")

    def integral(self, t: float, t_prime: float, schedule: Schedule | None = None) -> float:
        """Integral of beta over [t, t_prime]."""
        if self.kind == "zero":
            return 0.0
        if self.kind == "constant":
            return self.b * (t_prime - t)
        if self.kind == "ddpm":
            _need(schedule)
            return math.log(schedule.ratio(t_prime) / schedule.ratio(t))
        return integrate_beta(self, t, t_prime, schedule)


def _need(schedule):
    if schedule is None:
        raise DomainError("the DDPM beta schedule needs the diffusion schedule")


def integrate_beta(beta: BetaSchedule, t: float, t_prime: float, schedule: Schedule | None = None) -> float:
    """Adaptive quadrature of beta over [t, t_prime]."""
    value, _ = integrate.quad(
        lambda s: float(beta.beta(s, schedule)), t, t_prime, epsabs=1e-10, epsrel=1e-10, limit=200
    )
    return value


def gamma_between(b: BetaSchedule, t: float, t_prime: float, schedule: Schedule | None = None) -> float:
    """Exact OU mixing rate gamma = 1 - exp(-2 * int_t^t' beta) for the step t' -> t."""
    if t > t_prime:
        raise DomainError(f"gamma_between expects t <= t', got t={t}, t'={t_prime}")
    total = b.integral(t, t_prime, schedule)
    if total < 0:
        raise InvariantError(f"negative beta integral {total} over [{t}, {t_prime}]")
    return float(-math.expm1(-2.0 * total))


def ddpm_gamma_per_step(r_t: float, r_T: float, k: int) -> float:
    """Per-step injection rate that makes k constant-gamma refreshes match DDPM over [t, T]."""
    if r_t <= 0 or r_T <= 0:
        raise DomainError("sigma/alpha ratios must be positive")
    if r_t > r_T:
        raise DomainError("expected r_t <= r_T")
    if k < 1:
        raise DomainError("k must be >= 1")
    return float(-math.expm1((2.0 / k) * math.log(r_t / r_T)))


def ddpm_gamma_approx(r_t: float, r_T: float, k: int) -> float:
    """First-order approximation 2 log(r_T / r_t) / k of ``ddpm_gamma_per_step``."""
    if r_t <= 0 or r_T <= 0:
        raise DomainError("sigma/alpha ratios must be positive")
    return 2.0 * math.log(r_T / r_t) / k


@dataclass(frozen=True)
class AnnealSpec:
    """Monotone map from optimization step to diffusion time.

    ``stages`` is a sequence of ``(fraction, t_start, t_end)`` segments that are
    traversed linearly; an empty sequence means one linear stage from t_max to t_min.
    """

    t_max: float
    t_min: float
    total_steps: int
    stages: tuple = ()

    def __post_init__(self):
        if self.t_max < self.t_min:
            raise DomainError("t_max must be >= t_min")
        if self.total_steps < 0:
            raise DomainError("total_steps must be >= 0")
        stages = tuple(tuple(float(v) for v in st) for st in self.stages) or ((1.0, self.t_max, self.t_min),)
        object.__setattr__(self, "stages", stages)
        fractions = [f for f, _, _ in stages]
        if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
            raise DomainError("stage fractions must be positive and sum to 1")
        if stages[0][1] != self.t_max or stages[-1][2] != self.t_min:
            raise DomainError("stages must start at t_max and end at t_min")
        prev = self.t_max
        for _, a, b in stages:
            if not (prev >= a >= b):
                raise DomainError("annealing stages must be non-increasing")
            prev = b

    def __call__(self, tau: int) -> float:
        return anneal_timestep(self, tau)


def anneal_timestep(a: AnnealSpec, tau: int) -> float:
    if not 0 <= tau <= a.total_steps:
        raise DomainError(f"step {tau} outside [0, {a.total_steps}]")
    if a.total_steps == 0:
        return a.t_max
    u = tau / a.total_steps
    start = 0.0
    for i, (frac, t0, t1) in enumerate(a.stages):
        end = 1.0 if i == len(a.stages) - 1 else start + frac
        if u < end or i == len(a.stages) - 1:
            local = min(max((u - start) / frac, 0.0), 1.0)
            if local == 1.0:
                return t1
            return max(t0 + local * (t1 - t0), t1)
        start = end
    raise AssertionError("unreachable")
