import json

import numpy as np
import pytest
from scipy import integrate

from flowdistill.errors import DegenerateDensityError, DomainError
from flowdistill.schedule import Schedule
from flowdistill.teacher import GaussianMixtureTeacher, cfg_combine, load_teacher


def pixel_teacher(means, stds, weights, schedule=None):
    schedule = schedule or Schedule.vp()
    means = np.asarray(means, dtype=float).reshape(-1, 1, 1, 1)
    return GaussianMixtureTeacher(np.asarray(weights, float), means, np.asarray(stds, float), schedule)


def test_score_zero_at_diffused_mean():
    s = Schedule.vp()
    mu = np.random.default_rng(0).uniform(-1, 1, (4, 4, 3))
    t = GaussianMixtureTeacher.single(mu, 0.3, s)
    a, _ = s.alpha_sigma(0.4)
    assert np.allclose(t.score(a * mu, 0.4), 0.0)
    assert np.allclose(t.eps_pred(a * mu, 0.4), 0.0)


def test_score_scalar_example():
    table = Schedule.from_table([0.0, 1.0, 2.0], [1.0, 1.0, 1.0], [0.0, 1.0, 2.0])
    t = pixel_teacher([0.0], [0.0], [1.0], table)
    assert t.score(np.full((1, 1, 1), 2.0), 1.0).item() == pytest.approx(-2.0)


def test_mixture_score_matches_finite_difference():
    t = pixel_teacher([-0.7, 0.9], [0.2, 0.4], [0.3, 0.7])
    h = 1e-5
    for x in np.linspace(-2, 2, 9):
        for time in (0.1, 0.5, 0.9):
            xp = np.full((1, 1, 1), x)
            fd = (t.log_density(xp + h, time) - t.log_density(xp - h, time)) / (2 * h)
            assert t.score(xp, time).item() == pytest.approx(fd, rel=1e-5, abs=1e-6)


def test_eps_pred_recovers_injected_noise():
    s = Schedule.vp()
    rng = np.random.default_rng(1)
    mu = rng.uniform(-1, 1, (3, 3, 3))
    t = GaussianMixtureTeacher.single(mu, 0.0, s)
    eps = rng.standard_normal(mu.shape)
    a, sg = s.alpha_sigma(0.6)
    assert np.allclose(t.eps_pred(a * mu + sg * eps, 0.6), eps, atol=1e-12)


def test_sample_prediction_identity_and_point_mass():
    s = Schedule.vp()
    rng = np.random.default_rng(2)
    means = rng.uniform(-1, 1, (3, 2, 2, 3))
    t = GaussianMixtureTeacher(np.array([0.2, 0.5, 0.3]), means, np.array([0.1, 0.3, 0.0]), s)
    x = rng.standard_normal((2, 2, 3))
    a, sg = s.alpha_sigma(0.3)
    assert np.allclose(a * t.sample_prediction(x, 0.3) + sg * t.eps_pred(x, 0.3), x, atol=1e-12)
    single = GaussianMixtureTeacher.single(means[0], 0.0, s)
    assert np.allclose(single.sample_prediction(x, 0.3), means[0], atol=1e-12)


def test_sample_prediction_matches_quadrature():
    s = Schedule.vp()
    mus, stds, ws = [-0.6, 0.8], [0.25, 0.15], [0.4, 0.6]
    t = pixel_teacher(mus, stds, ws, s)
    time, x = 0.5, 0.2
    a, sg = s.alpha_sigma(time)

    def prior(x0):
        return sum(w * np.exp(-0.5 * ((x0 - m) / sd) ** 2) / sd for m, sd, w in zip(mus, stds, ws))

    def like(x0):
        return np.exp(-0.5 * ((x - a * x0) / sg) ** 2)

    num, _ = integrate.quad(lambda u: u * prior(u) * like(u), -4, 4, epsabs=1e-13, points=mus)
    den, _ = integrate.quad(lambda u: prior(u) * like(u), -4, 4, epsabs=1e-13, points=mus)
    assert t.sample_prediction(np.full((1, 1, 1), x), time).item() == pytest.approx(num / den, abs=1e-5)


def test_sample_prediction_within_mean_hull_for_point_masses():
    s = Schedule.vp()
    rng = np.random.default_rng(3)
    means = rng.uniform(-1, 1, (4, 3, 3, 2))
    t = GaussianMixtureTeacher(np.full(4, 0.25), means, np.zeros(4), s)
    lo, hi = means.min(axis=0), means.max(axis=0)
    for time in (0.05, 0.4, 0.95):
        for _ in range(5):
            pred = t.sample_prediction(3 * rng.standard_normal((3, 3, 2)), time)
            assert np.all(pred >= lo - 1e-12) and np.all(pred <= hi + 1e-12)


def test_batched_evaluation_matches_loop():
    s = Schedule.vp()
    rng = np.random.default_rng(4)
    t = GaussianMixtureTeacher(np.array([0.5, 0.5]), rng.uniform(-1, 1, (2, 2, 2, 3)), np.array([0.2, 0.1]), s)
    xs = rng.standard_normal((5, 2, 2, 3))
    batched = t.eps_pred(xs, 0.4)
    assert np.allclose(batched, np.stack([t.eps_pred(x, 0.4) for x in xs]))


def test_degenerate_density():
    table = Schedule.from_table([0.0, 1.0], [1.0, 0.5], [0.0, 0.8])
    t = pixel_teacher([0.0, 1.0], [0.0, 0.0], [0.5, 0.5], table)
    with pytest.raises(DegenerateDensityError):
        t.score(np.full((1, 1, 1), 0.3), 0.0)


def test_large_inputs_stay_finite():
    s = Schedule.vp()
    t = pixel_teacher([-1.0, 1.0], [0.0, 0.0], [0.5, 0.5], s)
    out = t.score(np.full((1, 1, 1), 1e4), s.t_s)
    assert np.isfinite(out).all()


def test_validation():
    s = Schedule.vp()
    with pytest.raises(DomainError):
        GaussianMixtureTeacher(np.array([0.5, 0.6]), np.zeros((2, 1, 1, 1)), np.zeros(2), s)
    with pytest.raises(DomainError):
        GaussianMixtureTeacher(np.array([1.0]), np.zeros((1, 1, 1, 1)), np.array([-0.1]), s)
    with pytest.raises(DomainError):
        GaussianMixtureTeacher.single(np.zeros((2, 2, 1)), 0.1, s).score(np.zeros((3, 3, 1)), 0.5)


def test_cfg_combine():
    c, u = np.full((2, 2, 1), 2.0), np.ones((2, 2, 1))
    assert np.array_equal(cfg_combine(c, u, 1.0), c)
    assert np.array_equal(cfg_combine(c, u, 0.0), u)
    assert np.all(cfg_combine(c, u, 75.0) == 76.0)
    with pytest.raises(DomainError):
        cfg_combine(c, np.ones((1, 2, 1)), 2.0)


def test_guided_prediction_uses_condition_subset():
    s = Schedule.vp()
    means = np.stack([np.full((1, 1, 1), -1.0), np.full((1, 1, 1), 1.0)])
    t = GaussianMixtureTeacher(np.array([0.5, 0.5]), means, np.array([0.1, 0.1]), s, {"warm": [1]})
    x = np.zeros((1, 1, 1))
    cond, uncond = t.eps_pred(x, 0.5, "warm"), t.eps_pred(x, 0.5)
    assert np.allclose(t.eps_guided(x, 0.5, "warm", 3.0), uncond + 3.0 * (cond - uncond))
    with pytest.raises(DomainError):
        t.eps_pred(x, 0.5, "cold")


def test_sampling_moments():
    s = Schedule.vp()
    t = GaussianMixtureTeacher.single(np.full((2, 2, 1), 0.4), 0.3, s)
    draws = t.sample(20000, np.random.default_rng(5))
    assert abs(draws.mean() - 0.4) < 3 * 0.3 / np.sqrt(draws.size)
    assert draws.std() == pytest.approx(0.3, rel=0.02)


def test_load_teacher_from_json_and_png(tmp_path):
    from PIL import Image

    Image.fromarray(np.full((8, 8, 3), 255, np.uint8)).save(tmp_path / "white.png")
    spec = {"shape": [4, 4, 3],
            "components": [{"weight": 1, "std": 0.1, "fill": [0.2, -0.4, 0.9]},
                           {"weight": 3, "std": 0.0, "image": "white.png"}],
            "conditions": {"white": [1]}}
    (tmp_path / "t.json").write_text(json.dumps(spec))
    t = load_teacher(tmp_path / "t.json", Schedule.vp())
    assert t.shape == (4, 4, 3)
    assert np.allclose(t.weights, [0.25, 0.75])
    assert np.allclose(t.means[0], [0.2, -0.4, 0.9])
    assert np.allclose(t.means[1], 1.0)
    assert t.conditions == {"white": [1]}
