"""Discrete variance-preserving diffusion schedule and elementary sampling steps.

Timesteps run ``1..T``; index 0 is the clean latent. All schedule arrays are
stored with length ``T + 1`` so they can be indexed by timestep directly,
with ``alpha_bar[0] = 1`` and ``beta[0] = sigma[0] = sigma_tilde[0] = 0``.

Vector arguments may carry leading batch axes; the last axis is the latent
dimension.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DiffusionSchedule",
    "make_linear_schedule",
    "noise_forward",
    "tweedie_posterior_mean",
    "ddpm_reverse_step",
    "ddim_step",
    "ddim_invert",
    "ddim_sample",
    "NonFiniteStateError",
]


class NonFiniteStateError(FloatingPointError):
    """A sampler produced NaN/Inf; carries the offending timestep and stage."""

    def __init__(self, t, stage="", detail=""):
        self.t = t
        self.stage = stage
        msg = f"non-finite state at t={t}"
        if stage:
            msg += f" (stage={stage})"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


def check_finite(x, t, stage=""):
    if not np.all(np.isfinite(x)):
        raise NonFiniteStateError(t, stage)


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """VP schedule indexed by timestep (entry 0 = clean level)."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    sigma_tilde: np.ndarray

    @classmethod
    def from_betas(cls, betas):
        betas = np.asarray(betas, dtype=float)
        if betas.ndim != 1 or betas.size < 2:
            raise ValueError("need at least two timesteps")
        if np.any(betas <= 0.0) or np.any(betas >= 1.0):
            raise ValueError("every beta must lie in (0, 1)")
        T = betas.size
        beta = np.concatenate([[0.0], betas])
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        sigma = np.sqrt(1.0 - alpha_bar)
        sigma_tilde = np.zeros(T + 1)
        ab_prev = alpha_bar[:-1]
        sigma_tilde[1:] = np.sqrt(beta[1:] * (1.0 - ab_prev) / (1.0 - alpha_bar[1:]))
        for arr in (beta, alpha, alpha_bar, sigma, sigma_tilde):
            arr.setflags(write=False)
        return cls(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma, sigma_tilde=sigma_tilde)

    def check_t(self, t, allow_zero=False):
        lo = 0 if allow_zero else 1
        if not (lo <= int(t) <= self.T) or int(t) != t:
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")
        return int(t)

    def __repr__(self):
        return (
            f"DiffusionSchedule(T={self.T}, beta=[{self.beta[1]:.3g}..{self.beta[-1]:.3g}], "
            f"alpha_bar_T={self.alpha_bar[-1]:.3g})"
        )


def make_linear_schedule(T=1000, beta_min=1e-4, beta_max=0.02):
    """Linear beta ramp from ``beta_min`` to ``beta_max`` over ``T`` steps."""
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    return DiffusionSchedule.from_betas(np.linspace(beta_min, beta_max, int(T)))


def _same_shape(a, b, what):
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"{what}: dimension mismatch {a.shape} vs {b.shape}")


def noise_forward(z0, t, eps, sched):
    """Sample ``z_t | z_0``: ``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``."""
    z0 = np.asarray(z0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    _same_shape(z0, eps, "noise_forward")
    t = sched.check_t(t, allow_zero=True)
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def tweedie_posterior_mean(z_t, score, t, sched):
    """``E[z_0 | z_t] = (z_t + (1 - ab_t) * score) / sqrt(ab_t)``."""
    t = sched.check_t(t, allow_zero=True)
    ab = sched.alpha_bar[t]
    if ab <= 0.0:
        raise ValueError("alpha_bar must be positive")
    return (np.asarray(z_t) + (1.0 - ab) * np.asarray(score)) / np.sqrt(ab)


def ddpm_reverse_step(z_t, z0_hat, t, eps, sched):
    """Ancestral step ``z_t -> z_{t-1}`` of the DDPM posterior ``q(z_{t-1} | z_t, z0_hat)``."""
    t = sched.check_t(t)
    a_t = sched.alpha[t]
    ab_t = sched.alpha_bar[t]
    ab_prev = sched.alpha_bar[t - 1]
    c_t = np.sqrt(a_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    c_0 = np.sqrt(ab_prev) * (1.0 - a_t) / (1.0 - ab_t)
    return c_t * np.asarray(z_t) + c_0 * np.asarray(z0_hat) + sched.sigma_tilde[t] * np.asarray(eps)


def _ddim_from_eps(z_t, eps_hat, t, t_next, sched):
    ab_t = sched.alpha_bar[t]
    ab_n = sched.alpha_bar[t_next]
    z0_hat = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    return np.sqrt(ab_n) * z0_hat + np.sqrt(1.0 - ab_n) * eps_hat


def ddim_step(z_t, score, t, t_next, sched):
    """Deterministic (eta = 0) DDIM move from level ``t`` to ``t_next``.

    ``score`` is the level-``t`` score at ``z_t``; it is converted to a noise
    prediction ``-sigma_t * score``. Works in either direction in time.
    """
    t = sched.check_t(t)
    t_next = sched.check_t(t_next, allow_zero=True)
    eps_hat = -sched.sigma[t] * np.asarray(score)
    return _ddim_from_eps(np.asarray(z_t), eps_hat, t, t_next, sched)


def _grid(start, stop, stride):
    pts = list(range(start, stop, stride if stop > start else -stride))
    pts.append(stop)
    return pts


def ddim_invert(z0, score_fn, sched, stride=1, record_stride=None, t_stop=None, refine=0):
    """Run the deterministic DDIM update forward in time from the clean latent.

    ``score_fn(z, t)`` returns the score of the level-``t`` marginal. Each
    step from ``t`` to ``t + stride`` uses the noise prediction of the target
    level evaluated at the current state (the usual explicit inversion);
    ``refine > 0`` adds that many fixed-point sweeps, evaluating it at the
    new state instead, which makes the step the exact inverse of
    :func:`ddim_step`.

    States are recorded every ``record_stride`` timesteps (defaults to
    ``stride``); the final state is always recorded. Returns a list of
    ``(t, z_t)``.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    t_stop = sched.T if t_stop is None else sched.check_t(t_stop)
    record_stride = stride if record_stride is None else record_stride
    z = np.asarray(z0, dtype=float)
    out = []
    grid = _grid(0, t_stop, stride)
    for t, t_next in zip(grid[:-1], grid[1:]):
        sig_n = sched.sigma[t_next]
        eps_hat = -sig_n * score_fn(z, t_next)
        z_new = _ddim_from_eps(z, eps_hat, t, t_next, sched)
        for _ in range(refine):
            eps_hat = -sig_n * score_fn(z_new, t_next)
            z_new = _ddim_from_eps(z, eps_hat, t, t_next, sched)
        z = z_new
        check_finite(z, t_next, "ddim_invert")
        if t_next % record_stride == 0 or t_next == t_stop:
            out.append((t_next, z))
    return out


def ddim_sample(z_T, score_fn, sched, stride=1, t_start=None, t_end=0):
    """Deterministic DDIM integration from ``t_start`` (default ``T``) down to ``t_end``."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    t_start = sched.T if t_start is None else sched.check_t(t_start, allow_zero=True)
    z = np.asarray(z_T, dtype=float)
    if t_start == t_end:
        return z
    grid = _grid(t_start, t_end, stride)
    for t, t_next in zip(grid[:-1], grid[1:]):
        z = ddim_step(z, score_fn(z, t), t, t_next, sched)
        check_finite(z, t_next, "ddim_sample")
    return z
