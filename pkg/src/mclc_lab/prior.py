"""Gaussian-mixture priors with closed-form diffused marginals and scores.

The mixture stands in for a trained score network: every VP-diffused
marginal of a Gaussian mixture is again a Gaussian mixture, so densities,
scores, score Jacobians and exact samples are all available in closed form.
"""

from dataclasses import dataclass
from functools import cached_property
import math

import numpy as np

from . import kernels

__all__ = [
    "GmmPrior",
    "GaussianLaw",
    "circle_prior",
    "marginal_at",
    "log_density",
    "score",
    "score_jacobian",
    "score_hvp",
    "sample",
    "gaussian_kl",
    "langevin_gaussian_propagate",
    "save_prior",
    "load_prior",
    "prior_to_text",
    "prior_from_text",
]

_WEIGHT_TOL = 1e-12
_SYM_TOL = 1e-12


def _as_batch(z, d):
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != d:
        raise ValueError(f"dimension mismatch: expected last axis {d}, got shape {z.shape}")
    lead = z.shape[:-1]
    return np.ascontiguousarray(z.reshape(-1, d)), lead


def _check_spd(cov, what="covariance"):
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"{what} must be square, got shape {cov.shape}")
    if np.max(np.abs(cov - cov.T), initial=0.0) > _SYM_TOL * max(1.0, np.max(np.abs(cov))):
        raise ValueError(f"{what} is not symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError(f"{what} is not positive definite") from None


@dataclass(frozen=True, eq=False)
class GmmPrior:
    """Weighted Gaussian mixture ``sum_i w_i N(mu_i, Sigma_i)`` in ``d`` dimensions."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        mu = np.array(self.means, dtype=float)
        cov = np.array(self.covariances, dtype=float)
        if mu.ndim != 2 or mu.shape[0] != w.size:
            raise ValueError("means must have shape (K, d) matching the weights")
        if cov.shape != (w.size, mu.shape[1], mu.shape[1]):
            raise ValueError("covariances must have shape (K, d, d)")
        if np.any(w < 0) or abs(w.sum() - 1.0) > _WEIGHT_TOL:
            raise ValueError("weights must be nonnegative and sum to 1")
        for k in range(w.size):
            _check_spd(cov[k], f"covariance {k}")
        for arr in (w, mu, cov):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)

    @classmethod
    def from_unnormalised(cls, weights, means, covariances):
        w = np.asarray(weights, dtype=float)
        return cls(w / w.sum(), means, covariances)

    @property
    def d(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return self.weights.size

    @cached_property
    def _factors(self):
        chol = np.linalg.cholesky(self.covariances)
        eye = np.eye(self.d)
        inv_chol = np.ascontiguousarray(np.stack([np.linalg.solve(L, eye) for L in chol]))
        # keep exact zeros above the diagonal; the kernels assume lower-triangular
        inv_chol = np.tril(inv_chol)
        with np.errstate(divide="ignore"):
            log_w = np.log(self.weights)
        log_norm = -0.5 * self.d * math.log(2 * math.pi) - np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
        return chol, inv_chol, log_w, log_norm

    @property
    def kernel_args(self):
        chol, inv_chol, log_w, log_norm = self._factors
        return log_w, np.ascontiguousarray(self.means), inv_chol, log_norm

    def mean(self):
        return self.weights @ self.means

    def covariance(self):
        """Covariance of the mixture as a whole (law of total variance)."""
        m = self.mean()
        diff = self.means - m
        return np.einsum("k,kij->ij", self.weights, self.covariances) + np.einsum("k,ki,kj->ij", self.weights, diff, diff)

    def __repr__(self):
        return f"GmmPrior(d={self.d}, K={self.n_components})"


@dataclass(frozen=True, eq=False)
class GaussianLaw:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        m = np.array(self.mean, dtype=float).reshape(-1)
        c = np.array(self.covariance, dtype=float)
        if c.shape != (m.size, m.size):
            raise ValueError("covariance shape does not match the mean")
        _check_spd(c)
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "covariance", c)

    @property
    def d(self):
        return self.mean.size

    def as_prior(self):
        return GmmPrior(np.ones(1), self.mean[None, :], self.covariance[None, :, :])


def circle_prior(d=2, n_components=3, radius=4.0, variance=0.5):
    """Equal-weight mixture with means on a circle in the first two coordinates."""
    if d < 2:
        raise ValueError("circle prior needs d >= 2")
    ang = 2 * np.pi * np.arange(n_components) / n_components
    means = np.zeros((n_components, d))
    means[:, 0] = radius * np.cos(ang)
    means[:, 1] = radius * np.sin(ang)
    covs = np.repeat(variance * np.eye(d)[None], n_components, axis=0)
    return GmmPrior(np.full(n_components, 1.0 / n_components), means, covs)


def marginal_at(prior, t, sched):
    """Exact law of ``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`` for ``z0 ~ prior``."""
    t = sched.check_t(t, allow_zero=True)
    if t == 0:
        return prior
    ab = sched.alpha_bar[t]
    covs = ab * prior.covariances + (1.0 - ab) * np.eye(prior.d)[None]
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    return GmmPrior(prior.weights, np.sqrt(ab) * prior.means, covs)


def log_density(prior_t, z):
    """``log sum_i w_i N(z; mu_i, Sigma_i)`` via a max-shifted log-sum-exp."""
    zb, lead = _as_batch(z, prior_t.d)
    out = kernels.mixture_logpdf(zb, *prior_t.kernel_args)
    return out.reshape(lead) if lead else float(out[0])


def score(prior_t, z):
    """``grad_z log p(z)`` for the mixture."""
    zb, lead = _as_batch(z, prior_t.d)
    _, s = kernels.mixture_score(zb, *prior_t.kernel_args)
    return s.reshape(np.shape(z))


def score_hvp(prior_t, z, v):
    """Product of the score Jacobian (log-density Hessian) at ``z`` with ``v``."""
    zb, _ = _as_batch(z, prior_t.d)
    vb = np.ascontiguousarray(np.broadcast_to(np.asarray(v, dtype=float), np.shape(z)).reshape(-1, prior_t.d))
    return kernels.mixture_score_hvp(zb, vb, *prior_t.kernel_args).reshape(np.shape(z))


def score_jacobian(prior_t, z):
    """Dense Hessian of ``log p`` at ``z`` (shape ``(..., d, d)``)."""
    z = np.asarray(z, dtype=float)
    d = prior_t.d
    cols = [score_hvp(prior_t, z, np.broadcast_to(e, z.shape)) for e in np.eye(d)]
    return np.stack(cols, axis=-1)


def sample(prior_t, n, rng):
    """Ancestral sampling: categorical component, then Cholesky-coloured noise."""
    if n < 1:
        raise ValueError("n must be >= 1")
    chol = prior_t._factors[0]
    comp = rng.choice(prior_t.n_components, size=n, p=prior_t.weights)
    eps = rng.standard_normal((n, prior_t.d))
    return prior_t.means[comp] + np.einsum("nij,nj->ni", chol[comp], eps)


def gaussian_kl(q, p):
    """Closed-form ``KL(q || p)`` between two Gaussian laws."""
    if q.d != p.d:
        raise ValueError("dimension mismatch")
    Lp = _check_spd(p.covariance)
    Lq = _check_spd(q.covariance)
    inv_Lp = np.linalg.inv(Lp)
    prec_p = inv_Lp.T @ inv_Lp
    diff = p.mean - q.mean
    logdet_p = 2 * np.sum(np.log(np.diag(Lp)))
    logdet_q = 2 * np.sum(np.log(np.diag(Lq)))
    return 0.5 * (np.trace(prec_p @ q.covariance) + diff @ prec_p @ diff - q.d + logdet_p - logdet_q)


def langevin_gaussian_propagate(init, target, eta, steps, scheme="euler_maruyama"):
    """Exact law of a Langevin chain targeting a Gaussian, started from a Gaussian.

    ``scheme="euler_maruyama"`` propagates the discretised update
    ``z <- z + eta * grad log p(z) + sqrt(2 eta) eps``; since the drift is
    affine the law stays Gaussian with ``m <- A m + b`` and
    ``C <- A C A^T + 2 eta I`` where ``A = I - eta P``.

    ``scheme="exact"`` instead advances the continuous-time Langevin
    diffusion by time ``eta`` per step (an Ornstein-Uhlenbeck transition),
    whose stationary law is the target itself.

    Returns the list of laws after each step (the initial law excluded).
    """
    if eta < 0:
        raise ValueError("eta must be nonnegative")
    if init.d != target.d:
        raise ValueError("dimension mismatch")
    d = init.d
    eye = np.eye(d)
    P = np.linalg.inv(target.covariance)
    P = 0.5 * (P + P.T)
    if scheme == "euler_maruyama":
        A = eye - eta * P
        radius = np.max(np.abs(np.linalg.eigvalsh(0.5 * (A + A.T))))
        if radius > 1.0:
            raise ValueError(f"step size {eta} makes the Langevin map expansive (spectral radius {radius:.4g})")
        noise = 2.0 * eta * eye
    elif scheme == "exact":
        evals, evecs = np.linalg.eigh(P)
        A = (evecs * np.exp(-eta * evals)) @ evecs.T
        # Sigma (I - exp(-2 eta P)), written in the eigenbasis of P
        noise = (evecs * ((1.0 - np.exp(-2.0 * eta * evals)) / evals)) @ evecs.T
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    b = (eye - A) @ target.mean
    m, C = init.mean.copy(), init.covariance.copy()
    laws = []
    for _ in range(int(steps)):
        m = A @ m + b
        C = A @ C @ A.T + noise
        C = 0.5 * (C + C.T)
        laws.append(GaussianLaw(m.copy(), C.copy()))
    return laws


# ---------------------------------------------------------------------------
# plain-text serialisation
# ---------------------------------------------------------------------------

_HEADER = "# mclc-lab gmm prior v1"


def prior_to_text(prior):
    lines = [_HEADER, f"dim {prior.d}", f"components {prior.n_components}"]
    for k in range(prior.n_components):
        lines.append(f"weight {float(prior.weights[k])!r}")
        lines.append("mean " + " ".join(repr(float(v)) for v in prior.means[k]))
        for row in prior.covariances[k]:
            lines.append("cov " + " ".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def prior_from_text(text):
    d = K = None
    weights, means, covs = [], [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *vals = line.split()
        try:
            nums = [float(v) for v in vals]
        except ValueError:
            raise ValueError(f"line {lineno}: non-numeric value in {raw!r}") from None
        if key == "dim":
            d = int(nums[0])
        elif key == "components":
            K = int(nums[0])
        elif key == "weight":
            weights.append(nums[0])
            covs.append([])
        elif key == "mean":
            means.append(nums)
        elif key == "cov":
            if not covs:
                raise ValueError(f"line {lineno}: cov row before any weight")
            covs[-1].append(nums)
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    if d is None or K is None:
        raise ValueError("prior file must declare dim and components")
    if not (len(weights) == len(means) == len(covs) == K):
        raise ValueError(f"expected {K} components, found {len(weights)}")
    w = np.array(weights)
    if abs(w.sum() - 1.0) > _WEIGHT_TOL:
        w = w / w.sum()
    return GmmPrior(w, np.array(means).reshape(K, d), np.array(covs).reshape(K, d, d))


def save_prior(prior, path):
    with open(path, "w") as fh:
        fh.write(prior_to_text(prior))


def load_prior(path):
    with open(path) as fh:
        return prior_from_text(fh.read())
