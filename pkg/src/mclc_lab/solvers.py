"""Latent diffusion inverse solvers with a pluggable Langevin corrector.

Four backbones share one reverse loop skeleton: ``ldps`` (DPS in latent
space), ``psld`` (adds the gluing term), ``resample`` (staged hard data
consistency with stochastic re-noising) and ``latent_daps`` (annealed
decoupled posterior sampling). The corrector is applied right after the
measurement step.

Every solve runs ``n`` independent chains in one ``(n, d)`` array. Two
generator streams are spawned from the seed: one drives the solver, the
other the corrector, so switching the corrector on or off leaves the
solver's own noise untouched.
"""

from dataclasses import dataclass, field
import csv
import logging

import numpy as np

from . import prior as prior_mod
from .corrector import CorrectorConfig, run_corrector
from .measurement import IdentityDecoder, residual, residual_gradient
from .schedule import NonFiniteStateError, check_finite, ddim_sample, ddpm_reverse_step, tweedie_posterior_mean

logger = logging.getLogger(__name__)

SOLVER_KINDS = ("ldps", "psld", "resample", "latent_daps")
GUIDANCE_JACOBIANS = ("exact", "stop_gradient")

__all__ = [
    "SolverConfig",
    "ResampleConfig",
    "DapsConfig",
    "TrajectoryStep",
    "Trajectory",
    "SolveResult",
    "ConfigurationError",
    "SolverDivergenceError",
    "seed_streams",
    "solve",
    "run_ldps",
    "run_psld",
    "run_resample",
    "run_latentdaps",
    "stochastic_resample",
    "SOLVER_KINDS",
]


class ConfigurationError(ValueError):
    pass


class SolverDivergenceError(RuntimeError):
    """Inner optimisation blew up; carries the step and residual history."""

    def __init__(self, t, iteration, residual_now, residual_min):
        self.t, self.iteration = t, iteration
        self.residual_now, self.residual_min = residual_now, residual_min
        super().__init__(
            f"latent optimisation diverged at t={t}, iteration {iteration}: "
            f"residual {residual_now:.4g} vs stage minimum {residual_min:.4g}"
        )


@dataclass(frozen=True)
class ResampleConfig:
    """Staged hard-consistency settings.

    Stages are given as fractions of ``T``: steps with ``t > pixel_start * T``
    only run the DPS backbone, ``latent_start * T < t <= pixel_start * T`` run
    pixel-space optimisation and ``t <= latent_start * T`` latent-space
    optimisation. Hard consistency fires every ``consistency_every`` steps.
    """

    n_pixel: int = 200
    n_latent: int = 50
    inner_lr: float = 0.1
    resample_gamma: float = 40.0
    pixel_start: float = 2.0 / 3.0
    latent_start: float = 1.0 / 3.0
    consistency_every: int = 10
    latent_score_level: str = "zero"
    divergence_factor: float = 10.0

    def validate(self):
        errors = []
        for name in ("n_pixel", "n_latent"):
            if getattr(self, name) < 0:
                errors.append(f"resample.{name} must be >= 0")
        for name in ("inner_lr", "resample_gamma", "divergence_factor"):
            if not getattr(self, name) > 0:
                errors.append(f"resample.{name} must be > 0")
        if not 0.0 <= self.latent_start <= self.pixel_start <= 1.0:
            errors.append("resample stages need 0 <= latent_start <= pixel_start <= 1")
        if self.consistency_every < 1:
            errors.append("resample.consistency_every must be >= 1")
        if self.latent_score_level not in ("zero", "current"):
            errors.append("resample.latent_score_level must be 'zero' or 'current'")
        return errors

    def stage(self, t, T):
        if t > self.pixel_start * T:
            return "skip"
        if t > self.latent_start * T:
            return "pixel"
        return "latent"


@dataclass(frozen=True)
class DapsConfig:
    """Annealed decoupled posterior sampling settings.

    The inner Langevin step size is ``langevin_lr * min(r_t^2, sigma_y^2)``
    with surrogate std ``r_t = surrogate_scale * sigma_t``.
    """

    n_anneal: int = 50
    n_langevin: int = 20
    langevin_lr: float = 0.5
    surrogate_scale: float = 0.5
    ode_steps: int = 2
    int_corrector: CorrectorConfig = field(default_factory=lambda: CorrectorConfig(cadence_k=1, n_c=0))

    def validate(self):
        errors = []
        if self.n_anneal < 1:
            errors.append("daps.n_anneal must be >= 1")
        if self.n_langevin < 0:
            errors.append("daps.n_langevin must be >= 0")
        if self.ode_steps < 1:
            errors.append("daps.ode_steps must be >= 1")
        for name in ("langevin_lr", "surrogate_scale"):
            if not getattr(self, name) > 0:
                errors.append(f"daps.{name} must be > 0")
        return errors


@dataclass(frozen=True)
class SolverConfig:
    """Solver choice, guidance scales and corrector settings.

    Args:
        solver_kind: one of ``ldps``, ``psld``, ``resample``, ``latent_daps``.
        zeta: measurement step scale.
        gamma_gluing: gluing weight (``psld`` only; needs the identity decoder).
        guidance_jacobian: ``exact`` differentiates through the Tweedie
            estimate with the score Hessian; ``stop_gradient`` uses
            ``1/sqrt(ab_t)`` in its place.
        record_stride: record the trajectory at steps with ``t % stride == 0``.
        corrector: main corrector.
        dps_corrector: per-step corrector of the ``resample`` DPS backbone.
    """

    solver_kind: str = "ldps"
    zeta: float = 1.0
    gamma_gluing: float = 0.0
    guidance_jacobian: str = "exact"
    record_stride: int = 1
    corrector: CorrectorConfig = field(default_factory=CorrectorConfig)
    dps_corrector: CorrectorConfig = field(default_factory=lambda: CorrectorConfig(cadence_k=1, n_c=0))
    resample: ResampleConfig = field(default_factory=ResampleConfig)
    daps: DapsConfig = field(default_factory=DapsConfig)

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ConfigurationError("invalid solver config: " + "; ".join(errors))

    def validate(self):
        errors = []
        if self.solver_kind not in SOLVER_KINDS:
            errors.append(f"solver_kind must be one of {SOLVER_KINDS} (got {self.solver_kind!r})")
        if self.zeta < 0:
            errors.append("zeta must be >= 0")
        if self.gamma_gluing < 0:
            errors.append("gamma_gluing must be >= 0")
        if self.guidance_jacobian not in GUIDANCE_JACOBIANS:
            errors.append(f"guidance_jacobian must be one of {GUIDANCE_JACOBIANS}")
        if self.record_stride < 1:
            errors.append("record_stride must be >= 1")
        errors += self.resample.validate() + self.daps.validate()
        return errors

    def with_corrector(self, **changes):
        from dataclasses import replace

        return replace(self, corrector=replace(self.corrector, **changes))

    @property
    def any_corrector(self):
        return self.corrector.enabled or self.dps_corrector.enabled or self.daps.int_corrector.enabled

    def without_correctors(self):
        """The corrector-free form: every corrector of this solver set to ``n_c = 0``."""
        from dataclasses import replace

        return replace(
            self,
            corrector=replace(self.corrector, n_c=0),
            dps_corrector=replace(self.dps_corrector, n_c=0),
            daps=replace(self.daps, int_corrector=replace(self.daps.int_corrector, n_c=0)),
        )


@dataclass
class TrajectoryStep:
    """State snapshots around one sampling step.

    ``level`` is the noise level of ``z_sharp``/``z_corrected``; residuals
    are taken at the Tweedie estimate of the clean latent for that level.
    """

    t: int
    level: int
    stage: str
    z_pre: np.ndarray
    z_sharp: np.ndarray
    z_corrected: np.ndarray
    residual_pre: np.ndarray
    residual_sharp: np.ndarray
    residual_corrected: np.ndarray
    records: list = field(default_factory=list)
    inner_records: list = field(default_factory=list)

    @property
    def corrected(self):
        return bool(self.records)

    @property
    def delta_z_norm_sq(self):
        return np.sum((self.z_corrected - self.z_sharp) ** 2, axis=-1)

    @property
    def mean_eta(self):
        if not self.records:
            return np.full(self.z_sharp.shape[0], np.nan)
        return np.mean([np.broadcast_to(r.eta, self.z_sharp.shape[:1]) for r in self.records], axis=0)


CSV_COLUMNS = ("t", "stage", "residual_pre", "residual_sharp", "residual_corrected", "delta_z_norm_sq", "eta", "chain")


def _fmt(x):
    x = float(x)
    return "" if np.isnan(x) else repr(x)


@dataclass
class Trajectory:
    steps: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def timesteps(self):
        return [s.t for s in self.steps]

    def at(self, t):
        for s in self.steps:
            if s.t == t:
                return s
        raise KeyError(t)

    def rows(self):
        for s in self.steps:
            dz, eta = s.delta_z_norm_sq, s.mean_eta
            for c in range(s.z_sharp.shape[0]):
                yield (s.t, s.stage, _fmt(s.residual_pre[c]), _fmt(s.residual_sharp[c]),
                       _fmt(s.residual_corrected[c]), _fmt(dz[c]), _fmt(eta[c]), c)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            w.writerows(self.rows())

    def write_latents(self, path):
        """Plain-text sidecar: ``t,chain,which,z_1,...,z_d`` per line."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for s in self.steps:
                for which in ("pre", "sharp", "corrected"):
                    z = getattr(s, "z_" + which)
                    for c, row in enumerate(z):
                        w.writerow([s.t, c, which] + [repr(float(v)) for v in row])


@dataclass
class SolveResult:
    x_hat: np.ndarray
    z0: np.ndarray
    trajectory: Trajectory
    metadata: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)


def seed_streams(seed):
    """``(solver_rng, corrector_rng)`` spawned from one seed."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    a, b = ss.spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


# ---------------------------------------------------------------------------
# shared machinery
# ---------------------------------------------------------------------------


class _Problem:
    """Binds prior, measurement, decoder and schedule for one solve."""

    def __init__(self, cfg, meas, prior, dec, sched):
        self.cfg, self.meas, self.prior, self.dec, self.sched = cfg, meas, prior, dec, sched
        self._marg = {}
        self.identity_decoder = isinstance(dec, IdentityDecoder)
        if prior.d != dec.latent_dim:
            raise ConfigurationError(f"prior dimension {prior.d} != decoder latent dimension {dec.latent_dim}")
        if dec.signal_dim != meas.operator.input_dim:
            raise ConfigurationError("decoder output does not match the operator input")
        if cfg.gamma_gluing > 0 and not self.identity_decoder:
            raise ConfigurationError("gluing needs an encoder; only available with the identity decoder")
        self.Aty = meas.operator.adjoint(meas.y) if cfg.gamma_gluing > 0 else None

    def marginal(self, t):
        m = self._marg.get(t)
        if m is None:
            m = self._marg[t] = prior_mod.marginal_at(self.prior, t, self.sched)
        return m

    def score(self, z, t):
        return prior_mod.score(self.marginal(t), z)

    def tweedie(self, z, t, s=None):
        if t == 0:
            return z
        s = self.score(z, t) if s is None else s
        return tweedie_posterior_mean(z, s, t, self.sched)

    def latent_residual(self, z, t):
        return np.atleast_1d(residual(self.tweedie(z, t), self.meas, self.dec))

    def chain_through_tweedie(self, z_t, t, v):
        """``(d z0_hat / d z_t)^T v``; the Jacobian is symmetric."""
        ab = self.sched.alpha_bar[t]
        if self.cfg.guidance_jacobian == "stop_gradient":
            return v / np.sqrt(ab)
        hv = prior_mod.score_hvp(self.marginal(t), z_t, v)
        return (v + (1.0 - ab) * hv) / np.sqrt(ab)

    def guidance(self, z_t, t, z0):
        """Measurement gradient ``g_t`` w.r.t. ``z_t`` (scaled by zeta, plus gluing)."""
        cfg = self.cfg
        grad0 = np.zeros_like(z0)
        if cfg.zeta > 0:
            grad0 = cfg.zeta * residual_gradient(z0, self.meas, self.dec)
        if cfg.gamma_gluing > 0:
            op = self.meas.operator
            u = op.adjoint(op.apply(z0)) - self.Aty
            grad0 = grad0 + cfg.gamma_gluing * 2.0 * op.adjoint(op.apply(u))
        if cfg.zeta == 0 and cfg.gamma_gluing == 0:
            return grad0
        return self.chain_through_tweedie(z_t, t, grad0)


def _init(meas, prior, seed, n, z_T):
    solver_rng, corr_rng = seed_streams(seed)
    if n is None:
        n = int(np.prod(meas.batch_shape)) if meas.y.ndim > 1 else 1
    if meas.y.ndim > 1 and meas.y.shape[0] != n:
        raise ConfigurationError(f"batch of {meas.y.shape[0]} observations but {n} chains requested")
    if z_T is None:
        z = solver_rng.standard_normal((n, prior.d))
    else:
        z = np.array(z_T, dtype=float).reshape(n, prior.d)
    return z, solver_rng, corr_rng


def _dps_step(pb, z, t, rng):
    """Reverse DDPM step plus the guided move; returns ``(z0_hat, z_prev, z_sharp, g)``."""
    s = pb.score(z, t)
    z0 = tweedie_posterior_mean(z, s, t, pb.sched)
    eps = rng.standard_normal(z.shape)
    z_prev = ddpm_reverse_step(z, z0, t, eps, pb.sched)
    check_finite(z_prev, t, "reverse")
    g = pb.guidance(z, t, z0)
    z_sharp = z_prev - g
    check_finite(z_sharp, t, "measurement")
    return z0, z_prev, z_sharp, g


def _finish(pb, z, traj, meta, squeeze):
    z0 = z[0] if squeeze else z
    x_hat = pb.dec.decode(z0)
    traj.metadata.update(meta)
    return SolveResult(x_hat=x_hat, z0=z0, trajectory=traj, metadata=dict(meta))


def _metadata(pb, seed, n, **extra):
    cfg = pb.cfg
    meta = {
        "solver_kind": cfg.solver_kind,
        "guidance_jacobian": cfg.guidance_jacobian,
        "seed": seed if isinstance(seed, int) else None,
        "n_chains": n,
        "T": pb.sched.T,
        "corrector_mode": cfg.corrector.mode,
        "corrector_enabled": cfg.corrector.enabled,
    }
    meta.update(extra)
    return meta


def _record(pb, traj, t, level, stage, z_pre, z_sharp, z_corr, records, inner=(), r_pre=None):
    if r_pre is None:
        r_pre = pb.latent_residual(z_pre, level)
    traj.steps.append(
        TrajectoryStep(
            t=t, level=level, stage=stage,
            z_pre=z_pre.copy(), z_sharp=z_sharp.copy(), z_corrected=z_corr.copy(),
            residual_pre=r_pre,
            residual_sharp=pb.latent_residual(z_sharp, level),
            residual_corrected=pb.latent_residual(z_corr, level),
            records=list(records), inner_records=list(inner),
        )
    )


# ---------------------------------------------------------------------------
# LDPS / PSLD
# ---------------------------------------------------------------------------


def _run_dps_family(pb, seed, n, z_T):
    cfg, sched = pb.cfg, pb.sched
    z, rng, crng = _init(pb.meas, pb.prior, seed, n, z_T)
    traj = Trajectory()
    for t in range(sched.T, 0, -1):
        _, z_prev, z_sharp, g = _dps_step(pb, z, t, rng)
        records = []
        z_new = z_sharp
        if cfg.corrector.active_at(t):
            level = t - 1
            z_new, records = run_corrector(
                z_sharp, cfg.corrector, pb.score, g, level, crng,
                sigma_t=sched.sigma[level],
                residual_fn=lambda zz, lv=level: pb.latent_residual(zz, lv),
            )
            check_finite(z_new, t, "corrector")
        if t % cfg.record_stride == 0:
            _record(pb, traj, t, t - 1, "guided", z_prev, z_sharp, z_new, records)
        z = z_new
    return z, traj


def run_ldps(cfg, meas, prior, dec, sched, seed=0, n=None, z_T=None):
    """Latent DPS with the corrector at steps ``t % cadence_k == 0`` (level ``t - 1``)."""
    pb = _Problem(cfg, meas, prior, dec, sched)
    z, traj = _run_dps_family(pb, seed, n, z_T)
    return _finish(pb, z, traj, _metadata(pb, seed, z.shape[0]), meas.y.ndim == 1 and n is None)


def run_psld(cfg, meas, prior, dec, sched, seed=0, n=None, z_T=None):
    """LDPS plus the gluing gradient (identity decoder only)."""
    pb = _Problem(cfg, meas, prior, dec, sched)
    z, traj = _run_dps_family(pb, seed, n, z_T)
    return _finish(pb, z, traj, _metadata(pb, seed, z.shape[0], gamma_gluing=cfg.gamma_gluing),
                   meas.y.ndim == 1 and n is None)


# ---------------------------------------------------------------------------
# ReSample
# ---------------------------------------------------------------------------


def stochastic_resample(z0_y, z_prime, level, gamma, sched, rng):
    """Draw from ``N((a m + b z') / (a + b), ab / (a + b) I)``.

    ``m = sqrt(ab_level) z0_y``, ``a = gamma`` and ``b = 1 - ab_level``; as
    ``gamma`` grows this tends to ``m + sqrt(b) eps``.
    """
    ab = sched.alpha_bar[level]
    a, b = float(gamma), 1.0 - ab
    eps = rng.standard_normal(np.shape(z0_y))
    if b == 0.0:
        return np.sqrt(ab) * z0_y
    mean = (a * np.sqrt(ab) * z0_y + b * z_prime) / (a + b)
    return mean + np.sqrt(a * b / (a + b)) * eps


def _pixel_optimise(pb, z0, rc):
    op, y = pb.meas.operator, pb.meas.y
    x = pb.dec.decode(z0)
    for _ in range(rc.n_pixel):
        x = x + rc.inner_lr * 2.0 * op.adjoint(y - op.apply(x))
    return x


def _latent_optimise(pb, z0, t, level, crng):
    cfg, rc = pb.cfg, pb.cfg.resample
    z = z0.copy()
    inner = []
    r = np.atleast_1d(residual(z, pb.meas, pb.dec))
    r_min = r.copy()
    floor = 1e-12 + 1e-6 * r
    score_level = 0 if rc.latent_score_level == "zero" else level
    for o in range(1, rc.n_latent + 1):
        g = residual_gradient(z, pb.meas, pb.dec)
        z = z - rc.inner_lr * g
        if cfg.corrector.active_at(o):
            z, recs = run_corrector(
                z, cfg.corrector, pb.score, g, score_level, crng,
                sigma_t=pb.sched.sigma[score_level] if score_level else None,
            )
            inner.extend(recs)
        check_finite(z, t, "latent_optimisation")
        r = np.atleast_1d(residual(z, pb.meas, pb.dec))
        bad = r > rc.divergence_factor * np.maximum(r_min, floor)
        if np.any(bad):
            i = int(np.argmax(bad))
            raise SolverDivergenceError(t, o, float(r[i]), float(r_min[i]))
        r_min = np.minimum(r_min, r)
    return z, inner


def run_resample(cfg, meas, prior, dec, sched, seed=0, n=None, z_T=None):
    """DPS backbone with per-step corrector plus staged hard consistency.

    In nonlinear-decoder mode the pixel stage is folded into the latent one.
    """
    pb = _Problem(cfg, meas, prior, dec, sched)
    rc = cfg.resample
    z, rng, crng = _init(meas, prior, seed, n, z_T)
    traj = Trajectory()
    for t in range(sched.T, 0, -1):
        level = t - 1
        z0, z_prev, z_sharp, g = _dps_step(pb, z, t, rng)
        records = []
        z_new = z_sharp
        if cfg.dps_corrector.active_at(t):
            z_new, records = run_corrector(
                z_sharp, cfg.dps_corrector, pb.score, g, level, crng, sigma_t=sched.sigma[level],
                residual_fn=lambda zz, lv=level: pb.latent_residual(zz, lv),
            )
        stage = rc.stage(t, sched.T)
        if stage == "pixel" and not pb.identity_decoder:
            stage = "latent"
        inner = []
        if stage != "skip" and t % rc.consistency_every == 0:
            if stage == "pixel":
                z0_y = _pixel_optimise(pb, z0, rc)
            else:
                z0_y, inner = _latent_optimise(pb, z0, t, level, crng)
            z_new = stochastic_resample(z0_y, z_new, level, rc.resample_gamma, sched, rng)
            check_finite(z_new, t, "resample")
        else:
            stage = "skip" if stage == "skip" else stage + "_idle"
        if t % cfg.record_stride == 0:
            _record(pb, traj, t, level, stage, z_prev, z_sharp, z_new, records, inner)
        z = z_new
    meta = _metadata(pb, seed, z.shape[0], pixel_stage=pb.identity_decoder,
                     stages=[rc.latent_start, rc.pixel_start])
    return _finish(pb, z, traj, meta, meas.y.ndim == 1 and n is None)


# ---------------------------------------------------------------------------
# LatentDAPS
# ---------------------------------------------------------------------------


def anneal_grid(T, n_anneal):
    """Levels ``t_0 = 0 < t_1 < ... < t_{N_A} = T`` (strictly increasing)."""
    grid = np.unique(np.round(np.linspace(0, T, n_anneal + 1)).astype(int))
    return [int(v) for v in grid]


def run_latentdaps(cfg, meas, prior, dec, sched, seed=0, n=None, z_T=None):
    """Annealed decoupled sampling.

    Each outer step solves the probability-flow ODE from ``z_{t_i}`` for a
    clean estimate, runs Langevin on ``log N(z0; z0_ode, r^2 I) + log p(y | z0)``
    with the main corrector every ``cadence_k`` inner steps, then re-noises to
    ``t_{i-1}`` and applies the intermediate corrector there.
    """
    pb = _Problem(cfg, meas, prior, dec, sched)
    dc = cfg.daps
    sigma_y = meas.noise_sigma
    if dc.n_langevin > 0 and sigma_y <= 0:
        raise ConfigurationError("latent_daps Langevin steps need a positive measurement noise sigma")
    z, rng, crng = _init(meas, prior, seed, n, z_T)
    grid = anneal_grid(sched.T, dc.n_anneal)
    traj = Trajectory()
    for i in range(len(grid) - 1, 0, -1):
        t_i, t_next = grid[i], grid[i - 1]
        stride = max(1, int(np.ceil(t_i / dc.ode_steps)))
        z0_ode = ddim_sample(z, pb.score, sched, stride=stride, t_start=t_i, t_end=0)
        r_t = dc.surrogate_scale * sched.sigma[t_i]
        lr = dc.langevin_lr * min(r_t**2, sigma_y**2) if dc.n_langevin else 0.0
        z0 = z0_ode.copy()
        inner = []
        for j in range(dc.n_langevin):
            g_lik = residual_gradient(z0, meas, dec)
            grad = -(z0 - z0_ode) / r_t**2 - g_lik / (2.0 * sigma_y**2)
            z0 = z0 + lr * grad + np.sqrt(2.0 * lr) * rng.standard_normal(z0.shape)
            if cfg.corrector.active_at(j + 1):
                z0, recs = run_corrector(z0, cfg.corrector, pb.score, g_lik, 0, crng)
                inner.extend(recs)
            check_finite(z0, t_i, "daps_langevin")
        g_last = residual_gradient(z0, meas, dec)
        eps = rng.standard_normal(z0.shape)
        z_sharp = np.sqrt(sched.alpha_bar[t_next]) * z0 + sched.sigma[t_next] * eps
        records = []
        z_new = z_sharp
        if dc.int_corrector.active_at(t_i):
            z_new, records = run_corrector(
                z_sharp, dc.int_corrector, pb.score, g_last, t_next, crng,
                sigma_t=sched.sigma[t_next] if t_next else None,
                residual_fn=lambda zz, lv=t_next: pb.latent_residual(zz, lv),
            )
        check_finite(z_new, t_i, "daps_renoise")
        if t_i % cfg.record_stride == 0 or cfg.record_stride == 1:
            r_pre = np.atleast_1d(residual(z0_ode, meas, dec))
            _record(pb, traj, t_i, t_next, "anneal", z0_ode, z_sharp, z_new, records, inner, r_pre=r_pre)
        z = z_new
    meta = _metadata(pb, seed, z.shape[0], anneal_levels=grid, sigma_y=sigma_y)
    return _finish(pb, z, traj, meta, meas.y.ndim == 1 and n is None)


_DISPATCH = {
    "ldps": run_ldps,
    "psld": run_psld,
    "resample": run_resample,
    "latent_daps": run_latentdaps,
}


def solve(cfg, meas, prior, dec, sched, seed=0, n=None, z_T=None):
    """Run the solver selected by ``cfg.solver_kind``.

    Args:
        cfg: :class:`SolverConfig`.
        meas: observation; ``y`` of shape ``(m,)`` is shared by all chains,
            ``(n, m)`` gives one observation per chain.
        prior: clean-latent prior (its time marginals supply the score).
        dec: decoder.
        sched: diffusion schedule.
        seed: int or SeedSequence; deterministic given this.
        n: number of chains (defaults to the batch size of ``y``, else 1).
        z_T: optional initial state.

    Returns:
        :class:`SolveResult`; single-chain solves return unbatched arrays.
    """
    if cfg.solver_kind == "psld" and cfg.gamma_gluing > 0 and not isinstance(dec, IdentityDecoder):
        raise ConfigurationError("gluing needs an encoder; only available with the identity decoder")
    try:
        return _DISPATCH[cfg.solver_kind](cfg, meas, prior, dec, sched, seed=seed, n=n, z_T=z_T)
    except NonFiniteStateError as exc:
        logger.error("%s aborted: %s", cfg.solver_kind, exc)
        raise
