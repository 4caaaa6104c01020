import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from flowdistill.errors import DomainError, InvariantError
from flowdistill.schedule import (
    AnnealSpec,
    BetaSchedule,
    Schedule,
    alpha_sigma,
    anneal_timestep,
    ddpm_gamma_approx,
    ddpm_gamma_per_step,
    gamma_between,
    integrate_beta,
    snr_ratio,
)


def test_edm_coefficients():
    s = Schedule.edm()
    assert alpha_sigma(s, 2.5) == (1.0, 2.5)
    assert alpha_sigma(s, 0.002) == (1.0, 0.002)
    assert snr_ratio(s, 3.0) == 3.0


def test_vp_endpoints():
    s = Schedule.vp()
    a0, s0 = s.alpha_sigma(s.t_s)
    assert abs(a0 - 1) <= 1e-3 and abs(s0) <= 1e-3
    aT, sT = s.alpha_sigma(s.T)
    assert aT == pytest.approx(0.01, abs=1e-12)
    assert sT == pytest.approx(1.0, abs=1e-3)
    s.validate()


def test_vp_ratio_one_where_alpha_equals_sigma():
    s = Schedule.vp()
    t = math.pi / 4 / s._angular_rate
    a, sg = s.alpha_sigma(t)
    assert a == pytest.approx(sg, abs=1e-15)
    assert s.ratio(t) == pytest.approx(1.0, abs=1e-12)


def test_from_ratio_hits_terminal_ratio():
    s = Schedule.from_ratio(12.59)
    assert s.ratio(s.T) == pytest.approx(12.59, rel=1e-12)


def test_domain_errors():
    s = Schedule.vp()
    with pytest.raises(DomainError):
        s.alpha_sigma(1.5)
    with pytest.raises(DomainError):
        s.alpha_sigma(0.0)
    with pytest.raises(DomainError):
        Schedule.edm().ratio(100.0)


def test_ratio_derivative_matches_finite_difference():
    s = Schedule.vp()
    for t in (0.1, 0.5, 0.9):
        h = 1e-6
        fd = (s.ratio(t + h) - s.ratio(t - h)) / (2 * h)
        assert s.ratio_derivative(t) == pytest.approx(fd, rel=1e-6)


def test_table_schedule_validation():
    good = Schedule.from_table([0.0, 0.5, 1.0], [1.0, 0.7, 0.1], [0.0, 0.7, 0.99])
    good.validate()
    bad = Schedule.from_table([0.0, 0.5, 1.0], [1.0, 0.5, 0.1], [0.0, 0.9, 0.05])
    with pytest.raises(InvariantError):
        bad.validate()


def test_gamma_zero_beta():
    assert gamma_between(BetaSchedule.zero(), 0.2, 0.7) == 0.0


def test_gamma_constant_beta():
    assert gamma_between(BetaSchedule.constant(0.5), 0.0, 1.0) == pytest.approx(1 - math.exp(-1), abs=1e-12)


def test_gamma_ddpm_closed_form_and_quadrature():
    s = Schedule.vp()
    b = BetaSchedule.ddpm()
    t = 0.3
    expected = 1 - (s.ratio(t) / s.ratio(s.T)) ** 2
    assert gamma_between(b, t, s.T, s) == pytest.approx(expected, abs=1e-12)
    quad, _ = integrate.quad(lambda u: s.ratio_derivative(u) / s.ratio(u), t, 0.9, epsabs=1e-12)
    assert b.integral(t, 0.9, s) == pytest.approx(quad, rel=1e-9)


def test_custom_beta_uses_quadrature():
    b = BetaSchedule.custom(lambda t: 2.0 * t)
    assert integrate_beta(b, 0.0, 1.0) == pytest.approx(1.0, abs=1e-10)
    assert gamma_between(b, 0.0, 1.0) == pytest.approx(1 - math.exp(-2), abs=1e-10)


def test_negative_beta_is_an_invariant_error():
    with pytest.raises(InvariantError):
        gamma_between(BetaSchedule.custom(lambda t: -1.0), 0.0, 1.0)


def test_gamma_interval_order():
    with pytest.raises(DomainError):
        gamma_between(BetaSchedule.constant(1.0), 0.8, 0.2)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 5.0), st.floats(0.01, 0.99), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_gamma_bounds_and_ou_additivity(b, t1, frac_a, frac_b):
    beta = BetaSchedule.constant(b)
    t2 = t1 + (1.0 - t1) * frac_a
    t3 = t2 + (1.0 - t2) * frac_b
    g13 = gamma_between(beta, t1, t3)
    assert 0.0 <= g13 < 1.0
    keep = (1 - gamma_between(beta, t1, t2)) * (1 - gamma_between(beta, t2, t3))
    assert 1 - g13 == pytest.approx(keep, abs=1e-12)


def test_ddpm_gamma_per_step_reference_value():
    g = ddpm_gamma_per_step(0.60, 12.59, 25000)
    assert g == pytest.approx(0.00024, rel=0.05)
    assert ddpm_gamma_approx(0.60, 12.59, 25000) == pytest.approx(g, rel=1e-3)


def test_ddpm_gamma_per_step_edge_cases():
    assert ddpm_gamma_per_step(3.0, 3.0, 10) == 0.0
    values = [ddpm_gamma_per_step(0.6, 12.59, k) for k in (10, 100, 1000, 10000)]
    assert all(a > b for a, b in zip(values, values[1:]))
    with pytest.raises(DomainError):
        ddpm_gamma_per_step(-1.0, 2.0, 10)


def test_anneal_boundaries_and_midpoint():
    a = AnnealSpec(0.98, 0.02, 100)
    assert anneal_timestep(a, 0) == 0.98
    assert anneal_timestep(a, 100) == 0.02
    assert anneal_timestep(a, 50) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(DomainError):
        anneal_timestep(a, 101)


def test_anneal_multistage_monotone_exhaustive():
    a = AnnealSpec(0.98, 0.02, 997, ((0.3, 0.98, 0.5), (0.2, 0.5, 0.5), (0.5, 0.5, 0.02)))
    ts = [a(k) for k in range(a.total_steps + 1)]
    assert ts[0] == 0.98 and ts[-1] == 0.02
    assert all(x >= y for x, y in zip(ts, ts[1:]))


def test_anneal_rejects_bad_stages():
    with pytest.raises(DomainError):
        AnnealSpec(0.9, 0.1, 10, ((0.5, 0.9, 0.5), (0.4, 0.5, 0.1)))
    with pytest.raises(DomainError):
        AnnealSpec(0.1, 0.9, 10)
