import numpy as np
import pytest

from mclc_lab.prior import GaussianLaw, circle_prior, marginal_at, sample, score
from mclc_lab.schedule import (DiffusionSchedule, ddim_invert, ddim_sample, ddim_step, ddpm_reverse_step,
                               make_linear_schedule, noise_forward, tweedie_posterior_mean)

# product of (1 - beta_i) for the default ramp, evaluated with a plain python loop
ALPHA_BAR_T_DEFAULT = 4.0358297653756754e-05


def test_default_schedule_invariants(sched):
    ab = sched.alpha_bar
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)
    assert ab[1] > 0.99 and ab[-1] < 0.01
    assert np.all((sched.beta[1:] > 0) & (sched.beta[1:] < 1))
    assert np.array_equal(sched.sigma, np.sqrt(1 - ab))
    assert sched.sigma_tilde[1] == 0.0
    t = np.arange(2, sched.T + 1)
    np.testing.assert_allclose(sched.sigma_tilde[t] ** 2,
                               sched.beta[t] * (1 - ab[t - 1]) / (1 - ab[t]), rtol=1e-12)


def test_alpha_bar_T_matches_direct_product(sched):
    assert sched.alpha_bar[-1] == pytest.approx(ALPHA_BAR_T_DEFAULT, rel=1e-10)


def test_constant_beta_two_steps():
    s = DiffusionSchedule.from_betas([0.5, 0.5])
    np.testing.assert_allclose(s.alpha_bar[1:], [0.5, 0.25])
    assert s.sigma_tilde[2] ** 2 == pytest.approx(1 / 3)


def test_make_linear_schedule_rejects_bad_input():
    with pytest.raises(ValueError):
        make_linear_schedule(1)
    with pytest.raises(ValueError):
        make_linear_schedule(10, 0.02, 0.01)
    with pytest.raises(ValueError):
        make_linear_schedule(10, 0.0, 0.01)


def test_schedule_arrays_are_read_only(sched):
    with pytest.raises(ValueError):
        sched.alpha_bar[3] = 0.0


def test_noise_forward_examples():
    s = DiffusionSchedule.from_betas([0.25, 0.5])
    z0 = np.array([1.0, -2.0])
    np.testing.assert_allclose(noise_forward(z0, 1, np.zeros(2), s), np.sqrt(0.75) * z0)
    np.testing.assert_allclose(noise_forward(np.zeros(2), 1, np.array([1.0, 0.0]), s), [0.5, 0.0])
    with pytest.raises(ValueError):
        noise_forward(z0, 1, np.zeros(3), s)
    with pytest.raises(ValueError):
        noise_forward(z0, 3, np.zeros(2), s)


def test_noise_forward_preserves_unit_covariance(sched, rng):
    z0 = rng.standard_normal((100_000, 2))
    eps = rng.standard_normal((100_000, 2))
    zt = noise_forward(z0, 500, eps, sched)
    np.testing.assert_allclose(np.cov(zt.T), np.eye(2), atol=0.02)


def test_tweedie_examples(sched, rng):
    z = rng.standard_normal(3)
    t = 300
    ab = sched.alpha_bar[t]
    np.testing.assert_allclose(tweedie_posterior_mean(z, np.zeros(3), t, sched), z / np.sqrt(ab))
    # unit-Gaussian data: E[z0 | z_t] = sqrt(ab) z_t
    np.testing.assert_allclose(tweedie_posterior_mean(z, -z, t, sched), np.sqrt(ab) * z, rtol=1e-12)
    np.testing.assert_allclose(tweedie_posterior_mean(z, 123 * z, 0, sched), z)


def test_ddpm_reverse_step_two_step_schedule():
    s = DiffusionSchedule.from_betas([0.5, 0.5])
    out = ddpm_reverse_step(np.array([1.0]), np.array([1.0]), 2, np.zeros(1), s)
    # both coefficients equal sqrt(0.5) * 0.5 / 0.75
    assert out[0] == pytest.approx(4 * np.sqrt(0.5) / 3, rel=1e-12)
    assert out[0] == pytest.approx(0.9428, abs=1e-4)


def test_ddpm_reverse_step_noise_free_ignores_sigma_tilde(sched, rng):
    z, z0 = rng.standard_normal((2, 4))
    a = ddpm_reverse_step(z, z0, 10, np.zeros(4), sched)
    c_t = np.sqrt(sched.alpha[10]) * (1 - sched.alpha_bar[9]) / (1 - sched.alpha_bar[10])
    c_0 = np.sqrt(sched.alpha_bar[9]) * sched.beta[10] / (1 - sched.alpha_bar[10])
    np.testing.assert_allclose(a, c_t * z + c_0 * z0, rtol=1e-13)


def test_ddpm_step_is_identity_in_the_no_noise_limit():
    s = DiffusionSchedule.from_betas([1e-12, 1e-12])
    z = np.array([0.3, -1.2])
    np.testing.assert_allclose(ddpm_reverse_step(z, z, 2, np.zeros(2), s), z, atol=1e-9)


def test_ddim_step_matches_closed_form(sched, rng):
    z, s = rng.standard_normal((2, 3))
    ab_t, ab_n = sched.alpha_bar[400], sched.alpha_bar[300]
    eps_hat = -np.sqrt(1 - ab_t) * s
    z0_hat = (z - np.sqrt(1 - ab_t) * eps_hat) / np.sqrt(ab_t)
    expected = np.sqrt(ab_n) * z0_hat + np.sqrt(1 - ab_n) * eps_hat
    np.testing.assert_allclose(ddim_step(z, s, 400, 300, sched), expected, rtol=1e-12)


def test_ddim_invert_stride_T_records_final_only(sched):
    out = ddim_invert(np.zeros(2), lambda z, t: -z, sched, stride=sched.T)
    assert [t for t, _ in out] == [sched.T]


def test_ddim_invert_variance_unit_gaussian(sched, rng):
    z0 = rng.standard_normal((10_000, 2))
    prior = GaussianLaw(np.zeros(2), np.eye(2)).as_prior()
    sf = lambda z, t: score(marginal_at(prior, t, sched), z)
    for t, zt in ddim_invert(z0, sf, sched, stride=1, record_stride=250):
        expected = sched.alpha_bar[t] * 1.0 + 1 - sched.alpha_bar[t]
        np.testing.assert_allclose(zt.var(axis=0), expected, rtol=0.03)


def test_ddim_round_trip_gmm_T200():
    s = make_linear_schedule(200)
    prior = circle_prior(2)
    sf = lambda z, t: score(marginal_at(prior, t, s), z)
    z0 = sample(prior, 200, np.random.default_rng(0))
    zT = ddim_invert(z0, sf, s, refine=2)[-1][1]
    back = ddim_sample(zT, sf, s)
    assert np.max(np.linalg.norm(back - z0, axis=1)) < 1e-2
