from dataclasses import replace

import numpy as np
import pytest

from mclc_lab.corrector import CorrectorConfig
from mclc_lab.measurement import (IdentityDecoder, Measurement, SmoothMapDecoder, make_measurement, make_operator,
                                  residual)
from mclc_lab.presets import load_preset
from mclc_lab.prior import GmmPrior, circle_prior, marginal_at, sample, score
from mclc_lab.runner import make_truth
from mclc_lab.schedule import ddpm_reverse_step, make_linear_schedule, tweedie_posterior_mean
from mclc_lab.solvers import (ConfigurationError, DapsConfig, ResampleConfig, SolverConfig, anneal_grid, seed_streams,
                              solve, stochastic_resample)

# mean terminal residual on the d=8 inpainting preset, runs 0..99, seeds 0..99
INPAINT_RESIDUAL_BASE = 5.0818177453686396e-05
INPAINT_RESIDUAL_MCLC = 5.081805792862482e-05

OFFSET_GMM = GmmPrior(np.array([0.4, 0.6]), np.array([[2.0, 1.0], [-1.0, 3.0]]),
                      np.array([[[0.5, 0.1], [0.1, 0.3]], [[0.4, 0.0], [0.0, 0.8]]]))


def small_problem(d=8, op_kind="average_downsample", sigma=0.05, n=None, seed=3):
    sched = make_linear_schedule(200)
    prior = circle_prior(d)
    dec = IdentityDecoder(d)
    op = make_operator({"kind": op_kind, "factor": 2} if op_kind == "average_downsample" else {"kind": op_kind}, d)
    rng = np.random.default_rng(seed)
    z = sample(prior, n or 1, rng)
    meas = make_measurement(op, dec, z if n else z[0], sigma, rng)
    return sched, prior, dec, meas


def assert_moments_close(z, prior, rel=0.05):
    """Mean and covariance within ``rel`` of the prior's, in norm."""
    m, c = prior.mean(), prior.covariance()
    assert np.linalg.norm(z.mean(axis=0) - m) <= rel * np.linalg.norm(m)
    assert np.linalg.norm(np.cov(z.T) - c) <= rel * np.linalg.norm(c)


def assert_same_result(a, b):
    assert np.array_equal(a.z0, b.z0)
    assert np.array_equal(a.x_hat, b.x_hat)
    assert a.trajectory.timesteps == b.trajectory.timesteps
    for sa, sb in zip(a.trajectory.steps, b.trajectory.steps):
        assert np.array_equal(sa.z_corrected, sb.z_corrected)
        assert np.array_equal(sa.residual_corrected, sb.residual_corrected)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        SolverConfig(solver_kind="dps")
    with pytest.raises(ConfigurationError):
        SolverConfig(zeta=-1.0)
    with pytest.raises(ConfigurationError):
        SolverConfig(resample=ResampleConfig(latent_start=0.9, pixel_start=0.5))
    with pytest.raises(ConfigurationError):
        SolverConfig(daps=DapsConfig(ode_steps=0))


def test_without_correctors_disables_every_corrector():
    cfg = SolverConfig(corrector=CorrectorConfig(n_c=2, lam=0.1), dps_corrector=CorrectorConfig(n_c=1, lam=0.05),
                       daps=DapsConfig(int_corrector=CorrectorConfig(n_c=1, lam=0.1)))
    assert cfg.any_corrector
    off = cfg.without_correctors()
    assert not off.any_corrector
    assert off.corrector.lam == 0.1 and off.zeta == cfg.zeta


def test_seed_streams_are_independent_and_deterministic():
    a1, b1 = seed_streams(5)
    a2, b2 = seed_streams(5)
    assert np.array_equal(a1.standard_normal(4), a2.standard_normal(4))
    assert not np.array_equal(seed_streams(5)[0].standard_normal(4), b2.standard_normal(4))


def test_unguided_ldps_is_plain_ddpm():
    sched, prior, dec, meas = small_problem()
    res = solve(SolverConfig(zeta=0.0), meas, prior, dec, sched, seed=11)
    rng, _ = seed_streams(11)
    z = rng.standard_normal((1, prior.d))
    for t in range(sched.T, 0, -1):
        z0 = tweedie_posterior_mean(z, score(marginal_at(prior, t, sched), z), t, sched)
        z = ddpm_reverse_step(z, z0, t, rng.standard_normal(z.shape), sched)
    np.testing.assert_array_equal(res.z0, z[0])


def test_unconditional_sampling_matches_prior_moments(sched):
    prior, dec = OFFSET_GMM, IdentityDecoder(2)
    meas = Measurement(np.zeros(2), make_operator({"kind": "identity"}, 2))
    res = solve(SolverConfig(zeta=0.0, record_stride=sched.T), meas, prior, dec, sched, seed=0, n=10_000)
    assert_moments_close(res.z0, prior)


def test_identity_problem_reaches_zero_residual(sched):
    prior, dec = circle_prior(8), IdentityDecoder(8)
    op = make_operator({"kind": "identity"}, 8)
    z = sample(prior, 100, np.random.default_rng(1))
    meas = make_measurement(op, dec, z, 0.0, np.random.default_rng(2))
    res = solve(SolverConfig(zeta=0.5, record_stride=sched.T), meas, prior, dec, sched, seed=0)
    r = residual(res.z0, meas, dec)
    assert np.mean(r < 1e-3) >= 0.9


@pytest.mark.parametrize("kind", ["ldps", "psld", "resample", "latent_daps"])
def test_same_seed_is_bit_identical(kind):
    sched, prior, dec, meas = small_problem()
    cfg = SolverConfig(solver_kind=kind, zeta=0.3, gamma_gluing=0.1 if kind == "psld" else 0.0,
                       corrector=CorrectorConfig(cadence_k=5, n_c=2, lam=0.1),
                       daps=DapsConfig(n_anneal=5, n_langevin=3),
                       # the default guard stops corrected latent optimisation on this problem
                       resample=ResampleConfig(divergence_factor=1e6))
    assert_same_result(solve(cfg, meas, prior, dec, sched, seed=4), solve(cfg, meas, prior, dec, sched, seed=4))


def test_psld_without_gluing_equals_ldps():
    sched, prior, dec, meas = small_problem()
    cc = CorrectorConfig(cadence_k=5, n_c=3, lam=0.15)
    a = solve(SolverConfig(solver_kind="ldps", zeta=0.4, corrector=cc), meas, prior, dec, sched, seed=2)
    b = solve(SolverConfig(solver_kind="psld", zeta=0.4, gamma_gluing=0.0, corrector=cc), meas, prior, dec, sched, seed=2)
    assert_same_result(a, b)


def test_gluing_vanishes_at_a_consistent_estimate():
    from mclc_lab.solvers import _Problem

    sched, prior, dec, _ = small_problem()
    op = make_operator({"kind": "identity"}, 8)
    z0 = np.random.default_rng(0).standard_normal(8)
    meas = Measurement(op.apply(z0), op)
    pb = _Problem(SolverConfig(solver_kind="psld", zeta=0.0, gamma_gluing=1.0), meas, prior, dec, sched)
    np.testing.assert_array_equal(pb.guidance(z0, 10, z0), 0.0)


def test_gluing_rejects_nonlinear_decoder():
    sched = make_linear_schedule(50)
    dec = SmoothMapDecoder(4, seed=0)
    op = make_operator({"kind": "identity"}, dec.signal_dim)
    meas = Measurement(np.zeros(dec.signal_dim), op)
    with pytest.raises(ConfigurationError):
        solve(SolverConfig(solver_kind="psld", gamma_gluing=0.1), meas, circle_prior(4), dec, sched)


def test_resample_with_all_stages_skipped_is_unguided_sampling():
    sched, prior, dec, meas = small_problem()
    rs = SolverConfig(solver_kind="resample", zeta=0.0, resample=ResampleConfig(pixel_start=0.0, latent_start=0.0))
    a = solve(rs, meas, prior, dec, sched, seed=7)
    b = solve(SolverConfig(zeta=0.0), meas, prior, dec, sched, seed=7)
    np.testing.assert_array_equal(a.z0, b.z0)
    assert {s.stage for s in a.trajectory.steps} == {"skip"}


def test_stochastic_resample_large_gamma_limit(sched):
    z0y, zp = np.array([1.0, -2.0]), np.array([5.0, 5.0])
    level = 300
    ab = sched.alpha_bar[level]
    out = stochastic_resample(z0y, zp, level, 1e12, sched, np.random.default_rng(0))
    eps = np.random.default_rng(0).standard_normal(2)
    np.testing.assert_allclose(out, np.sqrt(ab) * z0y + np.sqrt(1 - ab) * eps, rtol=1e-9)


def test_resample_stages(sched):
    rc = ResampleConfig()
    assert rc.stage(1000, 1000) == "skip"
    assert rc.stage(600, 1000) == "pixel"
    assert rc.stage(300, 1000) == "latent"


def test_resample_pixel_stage_folds_into_latent_for_nonlinear_decoder():
    sched = make_linear_schedule(60)
    dec = SmoothMapDecoder(4, seed=1)
    prior = circle_prior(4)
    op = make_operator({"kind": "average_downsample", "factor": 2}, dec.signal_dim)
    meas = make_measurement(op, dec, sample(prior, 1, np.random.default_rng(0))[0], 0.05, np.random.default_rng(1))
    cfg = SolverConfig(solver_kind="resample", zeta=0.3, resample=ResampleConfig(n_latent=5, consistency_every=5))
    res = solve(cfg, meas, prior, dec, sched, seed=0)
    stages = {s.stage for s in res.trajectory.steps}
    assert "pixel" not in stages and "latent" in stages
    assert res.metadata["pixel_stage"] is False


def test_anneal_grid():
    g = anneal_grid(1000, 50)
    assert g[0] == 0 and g[-1] == 1000 and len(g) == 51
    assert all(b > a for a, b in zip(g, g[1:]))


def test_daps_defaults():
    dc = DapsConfig()
    assert dc.n_anneal == 50 and dc.ode_steps == 2
    assert dc.int_corrector.n_c == 0


def test_daps_without_langevin_matches_prior_moments():
    sched = make_linear_schedule(1000)
    dec = IdentityDecoder(2)
    meas = Measurement(np.zeros(2), make_operator({"kind": "identity"}, 2), noise_sigma=0.0)
    cfg = SolverConfig(solver_kind="latent_daps", daps=DapsConfig(n_langevin=0, ode_steps=20))
    res = solve(cfg, meas, OFFSET_GMM, dec, sched, seed=1, n=10_000)
    assert_moments_close(res.z0, OFFSET_GMM)


def test_daps_langevin_requires_measurement_noise():
    sched, prior, dec, meas = small_problem(sigma=0.0)
    with pytest.raises(ConfigurationError):
        solve(SolverConfig(solver_kind="latent_daps"), meas, prior, dec, sched)


def test_corrector_runs_exactly_on_the_cadence():
    sched, prior, dec, meas = small_problem()
    cfg = SolverConfig(zeta=0.3, corrector=CorrectorConfig(cadence_k=15, n_c=3, lam=0.1))
    res = solve(cfg, meas, prior, dec, sched, seed=0)
    for step in res.trajectory.steps:
        assert step.corrected == (step.t % 15 == 0)
        if step.corrected:
            assert len(step.records) == 3 and all(r.t == step.t - 1 for r in step.records)


def test_paired_arms_share_the_prefix():
    sched, prior, dec, meas = small_problem()
    cfg = SolverConfig(zeta=0.3, corrector=CorrectorConfig(cadence_k=15, n_c=3, lam=0.1))
    a = solve(cfg.without_correctors(), meas, prior, dec, sched, seed=9)
    b = solve(cfg, meas, prior, dec, sched, seed=9)
    first = max(t for t in range(1, sched.T + 1) if t % 15 == 0)
    for sa, sb in zip(a.trajectory.steps, b.trajectory.steps):
        if sa.t < first:
            break
        assert np.array_equal(sa.z_sharp, sb.z_sharp)
    assert not np.array_equal(a.z0, b.z0)


def test_batched_observations_give_one_chain_each():
    sched, prior, dec, meas = small_problem(n=5)
    res = solve(SolverConfig(zeta=0.3), meas, prior, dec, sched, seed=0)
    assert res.z0.shape == (5, 8)
    with pytest.raises(ConfigurationError):
        solve(SolverConfig(), meas, prior, dec, sched, n=3)


def test_trajectory_csv(tmp_path):
    sched, prior, dec, meas = small_problem(n=2)
    res = solve(SolverConfig(zeta=0.3, record_stride=50, corrector=CorrectorConfig(cadence_k=50, n_c=1, lam=0.1)),
                meas, prior, dec, sched, seed=0)
    path = tmp_path / "traj.csv"
    res.trajectory.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,stage,residual_pre,residual_sharp,residual_corrected,delta_z_norm_sq,eta,chain"
    assert len(lines) == 1 + 2 * len(res.trajectory.steps)


@pytest.mark.slow
def test_inpainting_mean_residual_regression():
    cfg = load_preset("ldps_inpaint")
    sched, prior, op, dec = cfg.build()
    full = replace(cfg.solver_config, record_stride=sched.T)
    base = full.without_correctors()
    rb, rc = [], []
    for i in range(100):
        meas = make_truth(cfg, prior, op, dec, i)
        rb.append(residual(solve(base, meas, prior, dec, sched, seed=i).z0, meas, dec))
        rc.append(residual(solve(full, meas, prior, dec, sched, seed=i).z0, meas, dec))
    assert np.mean(rb) == pytest.approx(INPAINT_RESIDUAL_BASE, rel=1e-9)
    assert np.mean(rc) == pytest.approx(INPAINT_RESIDUAL_MCLC, rel=1e-9)
    assert np.mean(rc) <= np.mean(rb)
