"""Acceptance suite: twelve end-to-end checks with measured values and tolerances.

Each criterion returns a :class:`CriterionResult`. Criteria are run with
fixed seeds, so the verdict is reproducible. ``run_all`` is what
``mclc-lab verify`` and ``tests/test_acceptance.py`` call.
"""

from dataclasses import dataclass, field, replace
from pathlib import Path
import logging
import math
import tempfile
import time

import numpy as np

from . import prior as prior_mod
from .corrector import (CorrectorConfig, cubic_moment_ratio, expected_step_second_moment, lambda_bound,
                        lambda_bound_exact, langevin_step, mclc_step, run_corrector)
from .diagnostics import fit_gmm_em, kl_gap_curve, mc_kl, y_psnr
from .measurement import (BlurOperator, ComposeOperator, DownsampleOperator, IdentityDecoder, MaskOperator,
                          SmoothMapDecoder, gaussian_taps, make_measurement, principal_jacobian_direction,
                          residual, residual_gradient)
from .presets import load_preset
from .prior import GaussianLaw, GmmPrior, circle_prior, gaussian_kl, langevin_gaussian_propagate
from .schedule import make_linear_schedule
from .solvers import DapsConfig, ResampleConfig, SolverConfig, solve

logger = logging.getLogger(__name__)

__all__ = ["CriterionResult", "CRITERIA", "run_all", "run_criterion", "PRESET_FIXTURE"]


@dataclass
class CriterionResult:
    key: str
    title: str
    measured: str
    tolerance: str
    passed: bool
    runtime_s: float = 0.0
    runtime_limit_s: float = math.inf
    details: dict = field(default_factory=dict)

    @property
    def within_runtime(self):
        return self.runtime_s <= self.runtime_limit_s

    def line(self):
        verdict = "PASS" if self.passed else "FAIL"
        return (f"[{verdict}] {self.key:<12} {self.title}: measured {self.measured}; "
                f"tolerance {self.tolerance}; {self.runtime_s:.1f}s (limit {self.runtime_limit_s:g}s)")

    def to_dict(self):
        return {"key": self.key, "title": self.title, "measured": self.measured, "tolerance": self.tolerance,
                "passed": bool(self.passed), "runtime_s": self.runtime_s, "runtime_limit_s": self.runtime_limit_s,
                "within_runtime": bool(self.within_runtime), "details": self.details}


def _gaussian_fit(x):
    return GaussianLaw(x.mean(axis=0), np.cov(x, rowvar=False))


# ---------------------------------------------------------------------------
# 1. KL monotonicity of Langevin on a Gaussian target
# ---------------------------------------------------------------------------


def check_prop1(n_inits=100, eta=0.05, steps=50, n_samples=100_000, n_empirical=10, seed=0):
    rng = np.random.default_rng(seed)
    target = GaussianLaw(np.zeros(2), np.eye(2))
    tgt_prior = target.as_prior()
    worst_increase = -math.inf
    worst_rel = {1: 0.0, 10: 0.0, 50: 0.0}
    score_fn = lambda z, t: prior_mod.score(tgt_prior, z)
    for i in range(n_inits):
        a = rng.standard_normal((2, 2))
        init = GaussianLaw(2.0 * rng.standard_normal(2), a @ a.T + 0.1 * np.eye(2))
        laws = langevin_gaussian_propagate(init, target, eta, steps)
        kl = np.array([gaussian_kl(init, target)] + [gaussian_kl(q, target) for q in laws])
        worst_increase = max(worst_increase, float(np.max(np.diff(kl))))
        if i < n_empirical:
            z = prior_mod.sample(init.as_prior(), n_samples, rng)
            for k in range(1, steps + 1):
                z, _ = langevin_step(z, score_fn, 0, eta, rng)
                if k in worst_rel:
                    emp = gaussian_kl(_gaussian_fit(z), target)
                    worst_rel[k] = max(worst_rel[k], abs(emp - kl[k]) / kl[k])
    ok = worst_increase <= 0.0 and max(worst_rel.values()) <= 0.10
    devs = ", ".join(f"step {k}: {v:.1%}" for k, v in worst_rel.items())
    return (f"max KL step change {worst_increase:.3g}; max empirical rel. dev {devs}",
            "KL non-increasing every step; empirical within 10% at steps 1, 10, 50", ok,
            {"max_kl_increase": worst_increase, "max_relative_deviation": {str(k): v for k, v in worst_rel.items()}})


# ---------------------------------------------------------------------------
# 2-3. second moment of the adaptive step
# ---------------------------------------------------------------------------


def _fixed_norm_moment(lam, d=16, sigma_t=1.0, n=100_000, seed=0):
    s = np.zeros(d)
    s[0] = math.sqrt(d) / sigma_t
    score_fn = lambda z, t: np.broadcast_to(s, z.shape)
    cfg = CorrectorConfig(cadence_k=1, n_c=1, lam=lam, mode="vanilla")
    _, recs = run_corrector(np.zeros((n, d)), cfg, score_fn, None, 1, np.random.default_rng(seed))
    return float(np.mean(recs[0].delta_z_norm_sq))


def check_second_moment():
    devs = {}
    for lam in (0.05, 0.1, 0.2):
        mc = _fixed_norm_moment(lam)
        devs[lam] = abs(mc - expected_step_second_moment(lam, 16, 1.0)) / expected_step_second_moment(lam, 16, 1.0)
    worst = max(devs.values())
    return (f"max rel. dev {worst:.3%} ({', '.join(f'lam={k}: {v:.3%}' for k, v in devs.items())})",
            "<= 5%", worst <= 0.05, {str(k): v for k, v in devs.items()})


def check_lambda_bound():
    lam = lambda_bound(0.5, 16, 1.0)
    mc = _fixed_norm_moment(lam)
    lam_ok = lambda_bound_exact(0.5, 16, 1.0)
    mc_ok = _fixed_norm_moment(lam_ok)
    return (f"E|dz|^2 = {mc:.4g} at lam = {lam:.4g} (closed form {expected_step_second_moment(lam, 16, 1.0):.4g})",
            "<= 0.5", mc <= 0.5,
            {"lambda": lam, "mc": mc, "lambda_exact_bound": lam_ok, "mc_at_exact_bound": mc_ok})


# ---------------------------------------------------------------------------
# 4-5. residual behaviour of single MCLC steps
# ---------------------------------------------------------------------------


def check_quadratic_bound(n_steps=100, d=8, seed=0):
    rng = np.random.default_rng(seed)
    op = ComposeOperator([BlurOperator(d, gaussian_taps(5, 1.0)), DownsampleOperator(d, 2)])
    dec = IdentityDecoder(d)
    pr = circle_prior(d)
    sched = make_linear_schedule(1000)
    smax2 = op.spectral_norm() ** 2
    worst = -math.inf
    for _ in range(n_steps):
        lv = int(rng.integers(0, 1000))
        marg = prior_mod.marginal_at(pr, lv, sched)
        z = prior_mod.sample(marg, 1, rng)[0]
        meas = make_measurement(op, dec, prior_mod.sample(pr, 1, rng)[0], 0.1, rng)
        g = residual_gradient(z, meas, dec)
        s = prior_mod.score(marg, z)
        e = rng.standard_normal(d)
        eta = 0.15 * (e @ e) / (s @ s)
        z1, rec = mclc_step(z, lambda zz, t: prior_mod.score(marg, zz), lv, g, eta, rng, eps=e, score=s)
        dr = abs(residual(z1, meas, dec) - residual(z, meas, dec))
        bound = smax2 * float(rec.delta_z_norm_sq)
        # only floating-point rounding of the residual evaluation is allowed
        slack = 64 * np.finfo(float).eps * max(residual(z, meas, dec), 1.0)
        worst = max(worst, dr - bound - slack)
    return (f"max(|dr| - sigma_max^2 |dz|^2 - rounding) = {worst:.3g}", "<= 0 for all 100 steps",
            worst <= 0.0, {"worst_excess": worst})


def check_exact_invariance(n_iters=1000, n_trials=100, d=4, seed=0):
    rng = np.random.default_rng(seed)
    pr = circle_prior(d)
    dec = IdentityDecoder(d)
    op = MaskOperator(d, keep=[0])
    meas = make_measurement(op, dec, prior_mod.sample(pr, 1, rng)[0], 0.05, rng)
    score_fn = lambda z, t: prior_mod.score(pr, z)
    z = prior_mod.sample(pr, 1, rng)[0]
    r0 = residual(z, meas, dec)
    mclc = CorrectorConfig(cadence_k=1, n_c=1, lam=0.1)
    identical = True
    for _ in range(n_iters):
        z, _ = run_corrector(z, mclc, score_fn, residual_gradient(z, meas, dec), 0, rng)
        identical &= residual(z, meas, dec) == r0
    vanilla = replace(mclc, mode="vanilla")
    changed = 0
    for _ in range(n_trials):
        z = prior_mod.sample(pr, 1, rng)[0]
        z1, _ = run_corrector(z, vanilla, score_fn, None, 0, rng)
        changed += residual(z1, meas, dec) != residual(z, meas, dec)
    ok = bool(identical) and changed == n_trials
    return (f"MCLC residual bit-identical over {n_iters} iterations: {bool(identical)}; "
            f"vanilla changed r in {changed}/{n_trials}", "identical; 100/100", ok,
            {"identical": bool(identical), "vanilla_changed": int(changed)})


# ---------------------------------------------------------------------------
# 6. residual drift of MCLC versus plain Langevin inside LDPS
# ---------------------------------------------------------------------------


def _drift_arms(n_runs=100):
    from .runner import make_truth

    cfg = load_preset("drift_sr", [f"run.n_runs={n_runs}"])
    sched, pr, op, dec = cfg.build()
    scfg = replace(cfg.solver_config, record_stride=cfg.corrector.cadence_k)
    arms = {"measurement_consistent": scfg,
            "vanilla": replace(scfg, corrector=replace(scfg.corrector, mode="vanilla"))}
    out = {k: {"dr": [], "ypsnr": []} for k in arms}
    for i in range(n_runs):
        meas = make_truth(cfg, pr, op, dec, i)
        for name, c in arms.items():
            res = solve(c, meas, pr, dec, sched, seed=cfg.run.base_seed + i)
            for st in res.trajectory.steps:
                if st.records:
                    out[name]["dr"].append(float(np.abs(st.residual_corrected - st.residual_sharp)[0]))
            out[name]["ypsnr"].append(y_psnr(meas, res.x_hat))
    return out


def check_residual_drift(n_runs=100):
    out = _drift_arms(n_runs)
    med_m = float(np.median(out["measurement_consistent"]["dr"]))
    med_v = float(np.median(out["vanilla"]["dr"]))
    yp_m = float(np.mean(out["measurement_consistent"]["ypsnr"]))
    yp_v = float(np.mean(out["vanilla"]["ypsnr"]))
    ok = med_m <= 0.5 * med_v and yp_m >= yp_v
    return (f"median |dr| MCLC {med_m:.4g} vs vanilla {med_v:.4g} (ratio {med_m / med_v:.3f}); "
            f"mean y-PSNR {yp_m:.2f} vs {yp_v:.2f} dB",
            "ratio <= 0.5 and y-PSNR(MCLC) >= y-PSNR(vanilla)", ok,
            {"median_dr_mclc": med_m, "median_dr_vanilla": med_v, "ypsnr_mclc": yp_m, "ypsnr_vanilla": yp_v})


# ---------------------------------------------------------------------------
# 7. KL gap along LDPS trajectories
# ---------------------------------------------------------------------------


def kl_gap_experiment(cfg=None, n_trajectories=None, em_iters=500):
    from .runner import KL_TRUTH_STREAM, make_truth

    cfg = load_preset("kl_sr") if cfg is None else cfg
    dg = cfg.diagnostics
    n = dg.n_trajectories if n_trajectories is None else n_trajectories
    sched, pr, op, dec = cfg.build()
    meas = make_truth(cfg, pr, op, dec, KL_TRUTH_STREAM, n=n)
    scfg = cfg.solver_config
    base = solve(scfg.without_correctors(), meas, pr, dec, sched, seed=cfg.run.base_seed)
    corr = solve(scfg, meas, pr, dec, sched, seed=cfg.run.base_seed)
    return kl_gap_curve(base.trajectory, corr.trajectory, pr, sched, stride=dg.kl_stride,
                        gmm_components=dg.gmm_components, mc_samples=dg.mc_samples, mode=dg.reference_mode,
                        rng=np.random.default_rng([cfg.run.base_seed, 1]), em_iters=em_iters)


def check_kl_gap():
    rep = kl_gap_experiment()
    sm = rep.summary()
    gap_mean = sm["mean_kl_base"] - sm["mean_kl_corrected"]
    ok = (sm["fraction_improved_3se"] >= 0.8 and sm["mean_reduction"] >= 0.2
          and gap_mean > 3 * sm["mean_gap_se"])
    return (f"improved at {sm['fraction_improved']:.0%} of {len(rep.timesteps)} checkpoints "
            f"({sm['fraction_improved_3se']:.0%} by > 3 SE); mean reduction {sm['mean_reduction']:.1%} "
            f"(gap {gap_mean:.3g} +- {sm['mean_gap_se']:.2g})",
            ">= 80% of checkpoints by > 3 SE; mean reduction >= 20% with gap > 3 SE", ok,
            dict(sm, timesteps=rep.timesteps, kl_base=rep.kl_base, kl_corrected=rep.kl_corrected,
                 kl_null=rep.kl_null))


# ---------------------------------------------------------------------------
# 8. cubic moment ratio of a standard Gaussian
# ---------------------------------------------------------------------------


def check_cubic_ratio(n=100_000, seed=0):
    rng = np.random.default_rng(seed)
    r256 = cubic_moment_ratio(rng.standard_normal((n, 256)))
    r4 = cubic_moment_ratio(rng.standard_normal((n, 4)))
    ok = 1.0 < r256 <= 1.01 and 1.0 < r4 <= 1.2
    return (f"d=256: {r256:.5f}; d=4: {r4:.5f}", "(1, 1.01] at d=256; (1, 1.2] at d=4", ok,
            {"d256": r256, "d4": r4})


# ---------------------------------------------------------------------------
# 9. finite-difference gradient checks
# ---------------------------------------------------------------------------


def _central_diff(f, z, h):
    g = np.empty_like(z)
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        g[i] = (f(z + e) - f(z - e)) / (2 * h)
    return g


def check_gradients(n_points=50, seed=0):
    rng = np.random.default_rng(seed)
    d = 8
    worst_res = 0.0
    for dec in (IdentityDecoder(d), SmoothMapDecoder(d, seed=3)):
        n = dec.signal_dim
        ops = (MaskOperator(n, p=0.5, seed=1), DownsampleOperator(n, 2), BlurOperator(n, gaussian_taps(5, 1.0)),
               ComposeOperator([BlurOperator(n, gaussian_taps(5, 1.0)), DownsampleOperator(n, 2)]))
        for op in ops:
            meas = make_measurement(op, dec, rng.standard_normal(d), 0.05, rng)
            for _ in range(n_points):
                z = rng.standard_normal(d)
                g = residual_gradient(z, meas, dec)
                fd = _central_diff(lambda v: residual(v, meas, dec), z, 1e-6)
                worst_res = max(worst_res, np.linalg.norm(fd - g) / np.linalg.norm(g))
    sched = make_linear_schedule(1000)
    a = rng.standard_normal((3, 4, 4))
    aniso = GmmPrior(np.array([0.2, 0.5, 0.3]), 2.0 * rng.standard_normal((3, 4)),
                     a @ np.swapaxes(a, 1, 2) + 0.2 * np.eye(4))
    worst_score = 0.0
    for pr in (circle_prior(2), circle_prior(8), aniso):
        for lv in (0, 100, 500, 999):
            marg = prior_mod.marginal_at(pr, lv, sched)
            pts = prior_mod.sample(marg, n_points, rng)
            for z in pts:
                s = prior_mod.score(marg, z)
                fd = _central_diff(lambda v: float(prior_mod.log_density(marg, v)), z, 1e-5)
                worst_score = max(worst_score, np.linalg.norm(fd - s) / np.linalg.norm(s))
    ok = worst_res <= 1e-5 and worst_score <= 1e-6
    return (f"residual gradient max rel. err {worst_res:.2e}; GMM score max rel. err {worst_score:.2e}",
            "<= 1e-5 and <= 1e-6", ok, {"residual": worst_res, "score": worst_score})


# ---------------------------------------------------------------------------
# 10. reductions and determinism
# ---------------------------------------------------------------------------


def _same_result(a, b):
    if not np.array_equal(a.x_hat, b.x_hat) or len(a.trajectory.steps) != len(b.trajectory.steps):
        return False
    for sa, sb in zip(a.trajectory.steps, b.trajectory.steps):
        for attr in ("z_pre", "z_sharp", "z_corrected", "residual_pre", "residual_sharp", "residual_corrected"):
            if not np.array_equal(getattr(sa, attr), getattr(sb, attr)):
                return False
    return True


def _prefix_equal(base, corr):
    """Trajectories agree up to (and including the input of) the first corrector application."""
    for sb, sc in zip(base.trajectory.steps, corr.trajectory.steps):
        if not (np.array_equal(sb.z_pre, sc.z_pre) and np.array_equal(sb.z_sharp, sc.z_sharp)):
            return False
        if sc.records:
            return True
    return False


def check_reductions(seed=3):
    sched = make_linear_schedule(1000)
    d = 8
    pr = circle_prior(d)
    dec = IdentityDecoder(d)
    rng = np.random.default_rng(seed)
    meas = make_measurement(DownsampleOperator(d, 2), dec, prior_mod.sample(pr, 4, rng), 0.03, rng)
    checks = {}
    ldps = solve(SolverConfig(solver_kind="ldps", zeta=0.5), meas, pr, dec, sched, seed=seed)
    psld = solve(SolverConfig(solver_kind="psld", zeta=0.5, gamma_gluing=0.0), meas, pr, dec, sched, seed=seed)
    checks["psld_gamma0_equals_ldps"] = _same_result(ldps, psld)
    off = CorrectorConfig(cadence_k=7, n_c=0, lam=0.3, mode="vanilla")
    on = CorrectorConfig(cadence_k=5, n_c=2, lam=0.1)
    variants = {
        "ldps": (SolverConfig(solver_kind="ldps", zeta=0.5), {"corrector": off}, {"corrector": on}),
        "psld": (SolverConfig(solver_kind="psld", zeta=0.5, gamma_gluing=0.1), {"corrector": off}, {"corrector": on}),
        # the guard is relaxed: only trajectory identities are under test here
        "resample": (SolverConfig(solver_kind="resample", zeta=0.5,
                                  resample=ResampleConfig(n_pixel=20, n_latent=10, divergence_factor=1e12)),
                     {"corrector": off, "dps_corrector": off}, {"corrector": on, "dps_corrector": on}),
        "latent_daps": (SolverConfig(solver_kind="latent_daps", daps=DapsConfig(n_anneal=20, n_langevin=5)),
                        {"corrector": off, "daps": DapsConfig(n_anneal=20, n_langevin=5, int_corrector=off)},
                        {"corrector": on, "daps": DapsConfig(n_anneal=20, n_langevin=5, int_corrector=on)}),
    }
    for kind, (plain, zero, enabled) in variants.items():
        ref = solve(plain, meas, pr, dec, sched, seed=seed)
        checks[f"{kind}_nc0_equals_plain"] = _same_result(ref, solve(replace(plain, **zero), meas, pr, dec, sched,
                                                                     seed=seed))
        if kind in ("ldps", "psld", "resample"):
            corr = solve(replace(plain, record_stride=1, **enabled), meas, pr, dec, sched, seed=seed)
            base = solve(replace(plain, record_stride=1), meas, pr, dec, sched, seed=seed)
            checks[f"{kind}_paired_prefix"] = _prefix_equal(base, corr)
    checks["rerun_artifacts_identical"] = _rerun_identical()
    failed = [k for k, v in checks.items() if not v]
    return (f"{len(checks) - len(failed)}/{len(checks)} identities hold" + (f" (failed: {', '.join(failed)})"
                                                                             if failed else ""),
            "all bit-identical", not failed, checks)


def _rerun_identical():
    from .runner import run_experiment

    cfg = load_preset("ldps_sr", ["run.n_runs=2", "solver.record_stride=5"])
    with tempfile.TemporaryDirectory() as tmp:
        m1 = run_experiment(cfg, Path(tmp) / "a", jobs=1, dump_latents=True)
        m2 = run_experiment(cfg, Path(tmp) / "b", jobs=1, dump_latents=True)
        same_files = all((Path(tmp) / "a" / p).read_bytes() == (Path(tmp) / "b" / p).read_bytes()
                         for p in m1["artifacts"])
    return m1["artifacts"] == m2["artifacts"] and m1["config_hash"] == m2["config_hash"] and same_files


# ---------------------------------------------------------------------------
# 11. diagnostics oracles
# ---------------------------------------------------------------------------


def check_diagnostic_oracles(seed=0):
    rng = np.random.default_rng(seed)
    kl_z = []
    for d in (2, 4, 8):
        a, b = rng.standard_normal((2, d, d))
        q = GaussianLaw(rng.standard_normal(d), a @ a.T + 0.5 * np.eye(d))
        p = GaussianLaw(rng.standard_normal(d), b @ b.T + 0.5 * np.eye(d))
        est, se = mc_kl(q.as_prior(), p.as_prior(), 100_000, rng)
        kl_z.append(abs(est - gaussian_kl(q, p)) / se)
    em_ok = True
    for pr, k in ((circle_prior(2), 8), (circle_prior(8), 8), (circle_prior(4, n_components=5), 3)):
        x = prior_mod.sample(pr, 2000, rng)
        _, hist = fit_gmm_em(x, k, max_iters=200, seed=1, return_history=True)
        em_ok &= bool(np.all(np.diff(hist) >= -1e-9 * np.maximum(1.0, np.abs(hist[:-1]))))
    worst_eig = 0.0
    for d in (4, 8, 16, 32):
        dec = SmoothMapDecoder(d, seed=d)
        for _ in range(3):
            z = rng.standard_normal(d)
            J = dec.jacobian(z)
            dense = float(np.linalg.eigvalsh(J @ J.T)[-1])
            est = principal_jacobian_direction(dec, z, iters=5000, seed=1, tol=1e-12).value
            worst_eig = max(worst_eig, abs(est - dense) / dense)
    ok = max(kl_z) <= 3.0 and em_ok and worst_eig <= 1e-6
    return (f"mc_kl max |z| {max(kl_z):.2f}; EM monotone {em_ok}; power iteration max rel. err {worst_eig:.1e}",
            "|z| <= 3; monotone; <= 1e-6", ok,
            {"kl_z": kl_z, "em_monotone": em_ok, "eig_rel_err": worst_eig})


# ---------------------------------------------------------------------------
# 12. preset fidelity
# ---------------------------------------------------------------------------

# (cadence_k, n_c, lambda) of the main corrector, then the extra corrector:
# ReSample's per-step DPS corrector or LatentDAPS's intermediate corrector.
PRESET_FIXTURE = {
    "ldps_inpaint": ((15, 3, 0.07), None),
    "ldps_sr": ((15, 3, 0.15), None),
    "ldps_gdeblur": ((10, 3, 0.27), None),
    "ldps_mdeblur": ((10, 3, 0.27), None),
    "psld_inpaint": ((15, 3, 0.07), None),
    "psld_sr": ((15, 3, 0.15), None),
    "psld_gdeblur": ((10, 3, 0.27), None),
    "psld_mdeblur": ((10, 3, 0.27), None),
    "resample_inpaint": ((5, 3, 0.15), (1, 0.05)),
    "resample_sr": ((5, 3, 0.15), (1, 0.15)),
    "resample_gdeblur": ((10, 5, 0.15), (1, 0.15)),
    "resample_mdeblur": ((10, 5, 0.15), (1, 0.15)),
    "daps_inpaint": ((5, 3, 0.10), (1, 0.15)),
    "daps_sr": ((5, 3, 0.15), (0, 0.0)),
    "daps_gdeblur": ((5, 3, 0.10), (1, 0.15)),
    "daps_mdeblur": ((5, 3, 0.15), (3, 0.15)),
}


def check_presets():
    mismatches = []
    for name, (main, extra) in PRESET_FIXTURE.items():
        cfg = load_preset(name)
        c = cfg.corrector
        if (c.cadence_k, c.n_c, c.lam) != main:
            mismatches.append(f"{name}: corrector {(c.cadence_k, c.n_c, c.lam)} != {main}")
        if name.startswith("resample"):
            got = (cfg.solver.dps_corrector.n_c, cfg.solver.dps_corrector.lam)
        elif name.startswith("daps"):
            got = (cfg.solver.daps.int_corrector.n_c, cfg.solver.daps.int_corrector.lam)
        else:
            got = None
        if got != extra:
            mismatches.append(f"{name}: extra corrector {got} != {extra}")
    return (f"{len(PRESET_FIXTURE) - len({m.split(':')[0] for m in mismatches})}/{len(PRESET_FIXTURE)} presets match",
            "exact match", not mismatches, {"mismatches": mismatches})


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

CRITERIA = {
    "prop1": ("Langevin KL monotonicity on a Gaussian target", check_prop1, 10),
    "moment": ("second moment of the adaptive step", check_second_moment, 5),
    "lambda": ("lambda sufficient condition", check_lambda_bound, 5),
    "quadratic": ("quadratic-case residual bound", check_quadratic_bound, 2),
    "invariance": ("exact measurement invariance", check_exact_invariance, 2),
    "drift": ("MCLC versus vanilla residual drift", check_residual_drift, 300),
    "kl_gap": ("KL gap along LDPS trajectories", check_kl_gap, 900),
    "cubic": ("cubic moment ratio", check_cubic_ratio, 5),
    "gradients": ("finite-difference gradient checks", check_gradients, 10),
    "reductions": ("reductions and determinism", check_reductions, 60),
    "oracles": ("diagnostics oracles", check_diagnostic_oracles, 60),
    "presets": ("preset fidelity", check_presets, 1),
}


def run_criterion(key):
    title, fn, limit = CRITERIA[key]
    t0 = time.perf_counter()
    measured, tolerance, passed, details = fn()
    result = CriterionResult(key, title, measured, tolerance, bool(passed), time.perf_counter() - t0, limit, details)
    logger.info(result.line())
    return result


def run_all(only=None):
    keys = list(CRITERIA) if not only else list(only)
    unknown = [k for k in keys if k not in CRITERIA]
    if unknown:
        raise KeyError(f"unknown criteria {unknown}; available: {', '.join(CRITERIA)}")
    return [run_criterion(k) for k in keys]
