"""Langevin correctors: the plain Euler-Maruyama step and its projected variant.

The projected (measurement-consistent) step removes the component of both
drift and noise along the measurement gradient ``g``, so to first order the
residual is untouched. Step sizes are adaptive: ``eta = lam * |eps|^2 / |s|^2``
with the same ``eps`` that drives the noise term.

All functions accept a single latent ``(d,)`` or a batch ``(n, d)``; batch
entries are independent chains.
"""

from dataclasses import dataclass, asdict, field
from typing import Optional
import logging

import numpy as np

from .schedule import NonFiniteStateError

logger = logging.getLogger(__name__)

MODES = ("vanilla", "measurement_consistent")
G_FLOOR = 1e-12

__all__ = [
    "CorrectorConfig",
    "CorrectionRecord",
    "adaptive_step_size",
    "lambda_bound",
    "lambda_bound_exact",
    "expected_step_second_moment",
    "project_orthogonal",
    "langevin_step",
    "mclc_step",
    "run_corrector",
    "cubic_moment_ratio",
]


@dataclass(frozen=True)
class CorrectorConfig:
    """Corrector schedule and step-size settings.

    Args:
        cadence_k: apply the corrector at sampling steps with ``t % cadence_k == 0``.
        n_c: iterations per application (0 disables the corrector).
        lam: step-size factor; serialised as ``lambda``.
        mode: ``"vanilla"`` or ``"measurement_consistent"``.
        bound_target: if set, clip ``lam`` to :func:`lambda_bound` at each level.
        recompute_g: refresh the measurement gradient inside a block
            (experimental; off by default).
        eta_max: optional cap on the adaptive step. In low dimension
            ``1 / |s|^2`` is heavy tailed near modes and single steps can be
            arbitrarily large.
    """

    cadence_k: int = 1
    n_c: int = 0
    lam: float = field(default=0.1, metadata={"key": "lambda"})
    mode: str = "measurement_consistent"
    bound_target: Optional[float] = None
    recompute_g: bool = False
    eta_max: Optional[float] = None

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("invalid corrector config: " + "; ".join(errors))

    def validate(self):
        errors = []
        if int(self.cadence_k) != self.cadence_k or self.cadence_k < 1:
            errors.append(f"cadence_k must be an integer >= 1 (got {self.cadence_k})")
        if int(self.n_c) != self.n_c or self.n_c < 0:
            errors.append(f"n_c must be an integer >= 0 (got {self.n_c})")
        if self.n_c > 0 and not self.lam > 0:
            errors.append(f"lambda must be > 0 when n_c > 0 (got {self.lam})")
        if self.lam < 0:
            errors.append(f"lambda must be >= 0 (got {self.lam})")
        if self.mode not in MODES:
            errors.append(f"mode must be one of {MODES} (got {self.mode!r})")
        if self.bound_target is not None and not 0.0 < self.bound_target < 1.0:
            errors.append(f"bound_target must lie in (0, 1) (got {self.bound_target})")
        if self.eta_max is not None and not self.eta_max > 0:
            errors.append(f"eta_max must be > 0 (got {self.eta_max})")
        return errors

    @property
    def enabled(self):
        return self.n_c > 0

    def active_at(self, t):
        return self.enabled and t % self.cadence_k == 0

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


@dataclass
class CorrectionRecord:
    """One corrector iteration. Array fields hold one entry per chain."""

    t: int
    eta: np.ndarray
    delta_z_norm_sq: np.ndarray
    residual_before: Optional[np.ndarray] = None
    residual_after: Optional[np.ndarray] = None
    mode: str = "vanilla"
    iteration: int = 0
    fallback: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def delta_residual(self):
        if self.residual_before is None or self.residual_after is None:
            return None
        return np.asarray(self.residual_after) - np.asarray(self.residual_before)


def _sq(v):
    return np.sum(np.square(v), axis=-1)


def adaptive_step_size(score, eps, lam):
    """``lam * |eps|^2 / |score|^2`` (per row for batched input)."""
    s2 = _sq(np.asarray(score, dtype=float))
    if np.any(s2 == 0.0):
        raise ZeroDivisionError("score has zero norm; skip the corrector step at a stationary point")
    return lam * _sq(np.asarray(eps, dtype=float)) / s2


def lambda_bound(k, d, sigma_t):
    """Sufficient-condition value ``(1/sigma_t) sqrt(k / (d + 2))``.

    Note that with this ``lam`` the compact second-moment form
    :func:`expected_step_second_moment` evaluates to
    ``k + 2 sigma_t sqrt(k (d + 2))``, which exceeds ``k``; see
    :func:`lambda_bound_exact` for the value that actually attains ``k``.
    """
    if not 0.0 < k < 1.0:
        raise ValueError(f"k must lie in (0, 1), got {k}")
    if sigma_t <= 0 or d < 1:
        raise ValueError("need sigma_t > 0 and d >= 1")
    return np.sqrt(k / (d + 2)) / sigma_t


def lambda_bound_exact(k, d, sigma_t):
    """Largest ``lam`` with ``(lam^2 + 2 lam)(d + 2) sigma_t^2 <= k``."""
    if not k > 0.0:
        raise ValueError(f"k must be positive, got {k}")
    if sigma_t <= 0 or d < 1:
        raise ValueError("need sigma_t > 0 and d >= 1")
    v = k / ((d + 2) * sigma_t**2)
    # sqrt(1 + v) - 1 without cancellation
    return v / (np.sqrt(1.0 + v) + 1.0)


def expected_step_second_moment(lam, d, sigma_t):
    """``(lam^2 + 2 lam)(d + 2) sigma_t^2``; exact when ``|s|^2 = d / sigma_t^2``."""
    return (lam**2 + 2.0 * lam) * (d + 2) * sigma_t**2


def project_orthogonal(v, g):
    """Remove the component of ``v`` along ``g`` (row-wise)."""
    v = np.asarray(v, dtype=float)
    g = np.asarray(g, dtype=float)
    gn = np.sqrt(_sq(g))
    if np.any(gn == 0.0):
        raise ZeroDivisionError("cannot project against a zero gradient")
    gh = g / gn[..., None]
    return v - np.sum(gh * v, axis=-1, keepdims=True) * gh


def _checked_score(score_fn, z, t):
    s = np.asarray(score_fn(z, t), dtype=float)
    if not np.all(np.isfinite(s)):
        raise NonFiniteStateError(t, "corrector", "score is not finite")
    return s


def _eps(z, rng, eps):
    if eps is not None:
        return np.asarray(eps, dtype=float)
    return rng.standard_normal(np.shape(z))


def langevin_step(z, score_fn, t, eta, rng, eps=None, score=None):
    """Euler-Maruyama step ``z + eta s + sqrt(2 eta) eps``.

    ``eta`` may be a scalar or one value per chain. ``eps`` and ``score`` are
    hooks for callers that already hold them.
    """
    z = np.asarray(z, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if np.any(eta < 0):
        raise ValueError("eta must be >= 0")
    s = _checked_score(score_fn, z, t) if score is None else score
    e = _eps(z, rng, eps)
    dz = eta[..., None] * s + np.sqrt(2.0 * eta)[..., None] * e if eta.ndim else eta * s + np.sqrt(2.0 * eta) * e
    z_new = z + dz
    rec = CorrectionRecord(t=t, eta=eta, delta_z_norm_sq=_sq(dz), mode="vanilla")
    return z_new, rec


def mclc_step(z, score_fn, t, g, eta, rng, eps=None, score=None):
    """Projected step ``z + eta P s + sqrt(2 eta) P eps`` with ``P = I - g g^T / |g|^2``.

    Chains whose ``|g| < 1e-12`` fall back to the plain Langevin step (the
    projection is undefined there and the residual is already stationary).
    """
    z = np.asarray(z, dtype=float)
    g = np.broadcast_to(np.asarray(g, dtype=float), z.shape)
    eta = np.broadcast_to(np.asarray(eta, dtype=float), z.shape[:-1])
    if np.any(eta < 0):
        raise ValueError("eta must be >= 0")
    s = _checked_score(score_fn, z, t) if score is None else score
    e = _eps(z, rng, eps)
    gn = np.sqrt(_sq(g))
    fallback = gn < G_FLOOR
    safe_g = np.where(fallback[..., None], 1.0, g)
    drift = np.where(fallback[..., None], s, project_orthogonal(s, safe_g))
    noise = np.where(fallback[..., None], e, project_orthogonal(e, safe_g))
    dz = eta[..., None] * drift + np.sqrt(2.0 * eta)[..., None] * noise
    if np.any(fallback):
        logger.debug("t=%s: %d chain(s) with vanishing g use the plain step", t, int(np.sum(fallback)))
    rec = CorrectionRecord(t=t, eta=np.array(eta), delta_z_norm_sq=_sq(dz), mode="measurement_consistent",
                           fallback=np.array(fallback))
    return z + dz, rec


def run_corrector(z, cfg, score_fn, g, t, rng, sigma_t=None, residual_fn=None, g_fn=None):
    """Apply ``cfg.n_c`` corrector iterations at level ``t``.

    The score is re-evaluated at each iterate; ``g`` stays fixed over the
    block unless ``cfg.recompute_g`` is set and ``g_fn`` is given. A fresh
    ``eps`` is drawn per iteration and used for both ``eta`` and the noise.

    Args:
        z: latent(s), shape ``(d,)`` or ``(n, d)``.
        cfg: :class:`CorrectorConfig`.
        score_fn: ``score_fn(z, t)`` for the level-``t`` marginal.
        g: measurement gradient(s) at the pre-correction latent; ignored in
            vanilla mode.
        t: level passed to ``score_fn``.
        rng: numpy Generator; untouched when ``n_c == 0``.
        sigma_t: noise std of level ``t``; needed only with ``bound_target``.
        residual_fn: optional ``r(z)`` recorded before/after each iteration.
        g_fn: optional ``g_fn(z)`` used when ``cfg.recompute_g``.

    Returns:
        ``(z, records)``.
    """
    z = np.asarray(z, dtype=float)
    records = []
    if cfg.n_c == 0:
        return z, records
    lam = cfg.lam
    if cfg.bound_target is not None and sigma_t is not None and sigma_t > 0:
        lam = min(lam, lambda_bound(cfg.bound_target, z.shape[-1], sigma_t))
    mclc = cfg.mode == "measurement_consistent"
    r_prev = residual_fn(z) if residual_fn is not None else None
    for it in range(cfg.n_c):
        if mclc and cfg.recompute_g and g_fn is not None and it > 0:
            g = g_fn(z)
        s = _checked_score(score_fn, z, t)
        e = rng.standard_normal(z.shape)
        s2 = _sq(s)
        eta = np.where(s2 > 0.0, lam * _sq(e) / np.where(s2 > 0.0, s2, 1.0), 0.0)
        if cfg.eta_max is not None:
            eta = np.minimum(eta, cfg.eta_max)
        if mclc:
            z, rec = mclc_step(z, score_fn, t, g, eta, rng, eps=e, score=s)
        else:
            z, rec = langevin_step(z, score_fn, t, eta, rng, eps=e, score=s)
        if not np.all(np.isfinite(z)):
            raise NonFiniteStateError(t, "corrector")
        rec.iteration = it
        if residual_fn is not None:
            r_new = residual_fn(z)
            rec.residual_before, rec.residual_after = r_prev, r_new
            r_prev = r_new
        records.append(rec)
    return z, records


def cubic_moment_ratio(samples):
    """``mean(|u|^3) / mean(|u|^2)^(3/2)`` over rows of ``samples``."""
    u = np.asarray(samples, dtype=float)
    if u.ndim != 2 or u.shape[0] < 2:
        raise ValueError("need at least two sample vectors")
    n2 = _sq(u)
    m2 = n2.mean()
    if m2 == 0.0:
        raise ValueError("all samples are zero")
    return float(np.mean(n2**1.5) / m2**1.5)
