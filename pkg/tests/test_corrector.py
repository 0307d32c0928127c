import math

import numpy as np
import pytest

from mclc_lab.corrector import (CorrectorConfig, adaptive_step_size, cubic_moment_ratio, expected_step_second_moment,
                                lambda_bound, lambda_bound_exact, langevin_step, mclc_step, project_orthogonal,
                                run_corrector)
from mclc_lab.measurement import IdentityDecoder, MaskOperator, Measurement, residual, residual_gradient
from mclc_lab.prior import GaussianLaw, langevin_gaussian_propagate


def unit_score(z, t):
    return -np.asarray(z)


def test_config_validation():
    with pytest.raises(ValueError):
        CorrectorConfig(cadence_k=0)
    with pytest.raises(ValueError):
        CorrectorConfig(n_c=-1)
    with pytest.raises(ValueError):
        CorrectorConfig(n_c=1, lam=0.0)
    with pytest.raises(ValueError):
        CorrectorConfig(bound_target=1.0)
    with pytest.raises(ValueError):
        CorrectorConfig(mode="other")
    assert CorrectorConfig(n_c=0, lam=0.0).enabled is False
    cfg = CorrectorConfig(cadence_k=15, n_c=3, lam=0.07)
    assert CorrectorConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.to_dict()["lambda"] == 0.07


def test_adaptive_step_examples():
    s = np.array([4.0, 0.0])
    e = np.array([0.0, 2.0])
    assert adaptive_step_size(s, e, 0.1) == pytest.approx(0.025)
    assert adaptive_step_size(s, e, 0.0) == 0.0
    with pytest.raises(ZeroDivisionError):
        adaptive_step_size(np.zeros(2), e, 0.1)


def test_adaptive_step_expectation(rng):
    d, sigma, lam = 8, 0.7, 0.15
    eps = rng.standard_normal((100_000, d))
    s = np.full(d, 1.0 / sigma)  # |s|^2 = d / sigma^2
    eta = adaptive_step_size(s, eps, lam)
    assert np.mean(eta) == pytest.approx(lam * sigma**2, rel=0.02)


def test_lambda_bound_examples():
    assert lambda_bound(0.5, 2, 1.0) == pytest.approx(math.sqrt(0.125), rel=1e-14)
    assert lambda_bound(0.5, 2, 0.5) == pytest.approx(2 * lambda_bound(0.5, 2, 1.0), rel=1e-14)
    assert lambda_bound(0.5, 10**12, 1.0) < 1e-6
    with pytest.raises(ValueError):
        lambda_bound(1.5, 2, 1.0)


def test_second_moment_formula():
    assert expected_step_second_moment(0.1, 2, 1.0) == pytest.approx(0.84, rel=1e-14)


def test_second_moment_monte_carlo(rng):
    lam, d = 0.1, 16
    eps = rng.standard_normal((100_000, d))
    s = np.ones(d)  # |s|^2 = d at sigma = 1
    eta = lam * np.sum(eps**2, axis=1) / d
    dz = eta[:, None] * s + np.sqrt(2 * eta)[:, None] * eps
    mc = np.mean(np.sum(dz**2, axis=1))
    assert mc == pytest.approx(expected_step_second_moment(lam, d, 1.0), rel=0.05)


@pytest.mark.parametrize("k,d,sigma", [(0.5, 2, 1.0), (0.1, 16, 0.3), (0.9, 64, 2.0)])
def test_lambda_bound_exact_meets_target(k, d, sigma):
    lam = lambda_bound_exact(k, d, sigma)
    assert expected_step_second_moment(lam, d, sigma) == pytest.approx(k, rel=1e-12)


def test_lambda_bound_formula_overshoots_target():
    # the square-root rule drops the linear 2*lam term of the second moment
    k, d, sigma = 0.5, 16, 1.0
    lam = lambda_bound(k, d, sigma)
    m = expected_step_second_moment(lam, d, sigma)
    assert m == pytest.approx(k + 2 * lam * (d + 2) * sigma**2, rel=1e-12)
    assert m > k


def test_project_orthogonal_examples(rng):
    e1 = np.array([1.0, 0.0])
    np.testing.assert_array_equal(project_orthogonal(np.array([3.0, 4.0]), e1), [0.0, 4.0])
    g = rng.standard_normal(8)
    np.testing.assert_allclose(project_orthogonal(g, g), 0.0, atol=1e-14)
    v = rng.standard_normal(8)
    gh = g / np.linalg.norm(g)
    assert np.sum(project_orthogonal(v, g) ** 2) + (gh @ v) ** 2 == pytest.approx(v @ v, abs=1e-12)
    with pytest.raises(ZeroDivisionError):
        project_orthogonal(v, np.zeros(8))


def test_langevin_step_zero_eta(rng):
    z = rng.standard_normal(3)
    out, rec = langevin_step(z, unit_score, 5, 0.0, rng)
    np.testing.assert_array_equal(out, z)
    assert rec.delta_z_norm_sq == 0.0


def test_langevin_step_matches_gaussian_propagation(rng):
    init = GaussianLaw([2.0, -1.0], [[1.5, 0.4], [0.4, 0.8]])
    target = GaussianLaw([0.5, 0.0], [[1.0, 0.2], [0.2, 2.0]])
    prec = np.linalg.inv(target.covariance)
    score_fn = lambda z, t: -(z - target.mean) @ prec
    z = rng.multivariate_normal(init.mean, init.covariance, size=100_000)
    out, _ = langevin_step(z, score_fn, 0, 0.1, rng)
    (law,) = langevin_gaussian_propagate(init, target, 0.1, 1)
    np.testing.assert_allclose(out.mean(axis=0), law.mean, atol=0.02)
    np.testing.assert_allclose(np.cov(out.T), law.covariance, rtol=0.03, atol=0.01)


def test_corrector_uses_one_fresh_eps_per_iteration(rng):
    d, n, lam = 4, 20_000, 0.2
    s_const = np.array([1.0, -2.0, 0.5, 1.5])
    score_fn = lambda z, t: np.broadcast_to(s_const, np.shape(z))
    cfg = CorrectorConfig(n_c=2, lam=lam, mode="vanilla")
    z0 = np.zeros((n, d))
    _, recs = run_corrector(z0, cfg, score_fn, None, 3, rng)
    eps = []
    # rebuild the noise of each iteration from the step and its eta
    gen = np.random.default_rng(12345)
    zz = z0
    for rec in recs:
        e = gen.standard_normal(zz.shape)
        eta = lam * np.sum(e**2, axis=1) / (s_const @ s_const)
        np.testing.assert_allclose(rec.eta, eta, rtol=1e-12)
        eps.append(e)
        zz = zz + eta[:, None] * s_const + np.sqrt(2 * eta)[:, None] * e
    corr = np.corrcoef(eps[0].ravel(), eps[1].ravel())[0, 1]
    assert abs(corr) < 4 / math.sqrt(n * d)


def test_mclc_step_full_projection(rng):
    z = rng.standard_normal(3)
    s = unit_score(z, 0)
    out, _ = mclc_step(z, unit_score, 0, s, 0.3, rng, eps=np.zeros(3))
    np.testing.assert_allclose(out, z, atol=1e-15)


def test_mclc_step_is_orthogonal_to_g(rng):
    for _ in range(20):
        z, g = rng.standard_normal((2, 6))
        out, rec = mclc_step(z, unit_score, 1, g, rng.uniform(0, 0.5), rng)
        assert abs((out - z) @ g) <= 1e-12 * max(1.0, np.linalg.norm(g) * np.linalg.norm(out - z))
        assert not rec.fallback


def test_mclc_step_falls_back_on_vanishing_g(rng):
    z = rng.standard_normal((2, 3))
    g = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    out, rec = mclc_step(z, unit_score, 1, g, 0.1, rng)
    assert rec.fallback.tolist() == [True, False]
    assert out[1, 0] == z[1, 0]


def test_measurement_consistent_chain_keeps_measured_coordinate(rng):
    op = MaskOperator(4, keep=[0])
    dec = IdentityDecoder(4)
    meas = Measurement(np.array([0.7]), op)
    z = rng.standard_normal(4)
    g = residual_gradient(z, meas, dec)
    r0 = residual(z, meas, dec)
    cfg = CorrectorConfig(n_c=200, lam=0.2)
    out, recs = run_corrector(z, cfg, unit_score, g, 10, rng, residual_fn=lambda x: residual(x, meas, dec))
    assert out[0] == z[0]
    assert residual(out, meas, dec) == r0
    assert all(r.residual_after == r0 for r in recs)
    assert np.linalg.norm(out[1:] - z[1:]) > 0


def test_run_corrector_disabled_is_identity():
    rng = np.random.default_rng(1)
    state = rng.bit_generator.state
    z = np.arange(3.0)
    out, recs = run_corrector(z, CorrectorConfig(n_c=0), unit_score, np.ones(3), 5, rng)
    np.testing.assert_array_equal(out, z)
    assert recs == []
    assert rng.bit_generator.state == state


def test_bound_target_clips_lambda(rng):
    cfg = CorrectorConfig(n_c=1, lam=10.0, mode="vanilla", bound_target=0.5)
    z = rng.standard_normal((1000, 4))
    _, (rec,) = run_corrector(z, cfg, unit_score, None, 1, np.random.default_rng(0), sigma_t=1.0)
    e = np.random.default_rng(0).standard_normal(z.shape)
    expected = lambda_bound(0.5, 4, 1.0) * np.sum(e**2, 1) / np.sum(z**2, 1)
    np.testing.assert_allclose(rec.eta, expected, rtol=1e-12)


def test_eta_max_caps_steps(rng):
    cfg = CorrectorConfig(n_c=1, lam=1.0, mode="vanilla", eta_max=0.01)
    z = 1e-3 * rng.standard_normal((100, 2))
    _, (rec,) = run_corrector(z, cfg, unit_score, None, 1, rng)
    assert np.max(rec.eta) == 0.01


def test_cubic_moment_ratio():
    assert cubic_moment_ratio(np.ones((5, 3))) == pytest.approx(1.0, rel=1e-15)
    rng = np.random.default_rng(2)
    k256 = cubic_moment_ratio(rng.standard_normal((100_000, 256)))
    k4 = cubic_moment_ratio(rng.standard_normal((100_000, 4)))
    assert 1.0 < k256 <= 1.01
    assert 1.0 < k4 <= 1.2
    with pytest.raises(ValueError):
        cubic_moment_ratio(np.zeros((3, 2)))
