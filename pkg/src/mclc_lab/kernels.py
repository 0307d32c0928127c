"""Gaussian-mixture inner loops.

Every kernel exists twice: a numba ``@njit`` version (loops, no temporaries)
and a vectorised numpy version. The public names are bound to one of them at
import time according to :data:`mclc_lab._accel.USE_NUMBA`; both remain
reachable through :data:`NUMPY_KERNELS` and :data:`NUMBA_KERNELS` so the two
paths can be cross-checked and benchmarked against each other.

Mixture parameters are passed in factored form:

``log_w``     (K,)      log mixture weights (``-inf`` allowed)
``means``     (K, d)
``inv_chol``  (K, d, d) lower-triangular ``L_k^{-1}`` with ``Sigma_k = L_k L_k^T``
``log_norm``  (K,)      ``-d/2 log(2 pi) - sum(log diag L_k)``
"""

import math

import numpy as np

from ._accel import NUMBA_AVAILABLE, USE_NUMBA, njit

__all__ = [
    "component_log_prob",
    "mixture_logpdf",
    "mixture_responsibilities",
    "mixture_score",
    "mixture_score_hvp",
    "NUMPY_KERNELS",
    "NUMBA_KERNELS",
]


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------


def _np_whiten(x, means, inv_chol):
    diff = x[:, None, :] - means[None, :, :]
    return np.einsum("kij,nkj->nki", inv_chol, diff)


def _np_component_log_prob(x, log_w, means, inv_chol, log_norm):
    y = _np_whiten(x, means, inv_chol)
    maha = np.einsum("nki,nki->nk", y, y)
    return log_w[None, :] + log_norm[None, :] - 0.5 * maha


def _np_logsumexp(a):
    amax = np.max(a, axis=1)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    s = np.sum(np.exp(a - amax[:, None]), axis=1)
    return amax + np.log(s)


def _np_mixture_logpdf(x, log_w, means, inv_chol, log_norm):
    return _np_logsumexp(_np_component_log_prob(x, log_w, means, inv_chol, log_norm))


def _np_mixture_responsibilities(x, log_w, means, inv_chol, log_norm):
    a = _np_component_log_prob(x, log_w, means, inv_chol, log_norm)
    logp = _np_logsumexp(a)
    return logp, np.exp(a - logp[:, None])


def _np_mixture_score(x, log_w, means, inv_chol, log_norm):
    y = _np_whiten(x, means, inv_chol)
    a = log_w[None, :] + log_norm[None, :] - 0.5 * np.einsum("nki,nki->nk", y, y)
    logp = _np_logsumexp(a)
    resp = np.exp(a - logp[:, None])
    # component scores -L^{-T} y
    comp = -np.einsum("kji,nkj->nki", inv_chol, y)
    return logp, np.einsum("nk,nki->ni", resp, comp)


def _np_mixture_score_hvp(x, v, log_w, means, inv_chol, log_norm):
    y = _np_whiten(x, means, inv_chol)
    a = log_w[None, :] + log_norm[None, :] - 0.5 * np.einsum("nki,nki->nk", y, y)
    logp = _np_logsumexp(a)
    resp = np.exp(a - logp[:, None])
    comp = -np.einsum("kji,nkj->nki", inv_chol, y)
    score = np.einsum("nk,nki->ni", resp, comp)
    lv = np.einsum("kij,nj->nki", inv_chol, v)
    prec_v = np.einsum("kji,nkj->nki", inv_chol, lv)
    comp_dot = np.einsum("nki,ni->nk", comp, v)
    hv = np.einsum("nk,nki->ni", resp, comp * comp_dot[:, :, None] - prec_v)
    hv -= score * np.einsum("ni,ni->n", score, v)[:, None]
    return hv


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------


@njit(cache=True)
def _nb_component_log_prob(x, log_w, means, inv_chol, log_norm):
    n, d = x.shape
    K = means.shape[0]
    out = np.empty((n, K))
    diff = np.empty(d)
    for i in range(n):
        for k in range(K):
            for a in range(d):
                diff[a] = x[i, a] - means[k, a]
            maha = 0.0
            for a in range(d):
                acc = 0.0
                for b in range(a + 1):
                    acc += inv_chol[k, a, b] * diff[b]
                maha += acc * acc
            out[i, k] = log_w[k] + log_norm[k] - 0.5 * maha
    return out


@njit(cache=True)
def _nb_row_logsumexp(row):
    m = -np.inf
    for v in row:
        if v > m:
            m = v
    if not math.isfinite(m):
        m = 0.0
    s = 0.0
    for v in row:
        s += math.exp(v - m)
    return m + math.log(s)


@njit(cache=True)
def _nb_mixture_logpdf(x, log_w, means, inv_chol, log_norm):
    a = _nb_component_log_prob(x, log_w, means, inv_chol, log_norm)
    n = x.shape[0]
    out = np.empty(n)
    for i in range(n):
        out[i] = _nb_row_logsumexp(a[i])
    return out


@njit(cache=True)
def _nb_mixture_responsibilities(x, log_w, means, inv_chol, log_norm):
    a = _nb_component_log_prob(x, log_w, means, inv_chol, log_norm)
    n, K = a.shape
    logp = np.empty(n)
    resp = np.empty((n, K))
    for i in range(n):
        lp = _nb_row_logsumexp(a[i])
        logp[i] = lp
        for k in range(K):
            resp[i, k] = math.exp(a[i, k] - lp)
    return logp, resp


@njit(cache=True)
def _nb_score_core(x, v, log_w, means, inv_chol, log_norm, want_hvp):
    n, d = x.shape
    K = means.shape[0]
    logp = np.empty(n)
    score = np.zeros((n, d))
    hv = np.zeros((n, d))
    y = np.empty((K, d))
    comp = np.empty((K, d))
    a = np.empty(K)
    lv = np.empty(d)
    for i in range(n):
        for k in range(K):
            maha = 0.0
            for r in range(d):
                acc = 0.0
                for c in range(r + 1):
                    acc += inv_chol[k, r, c] * (x[i, c] - means[k, c])
                y[k, r] = acc
                maha += acc * acc
            a[k] = log_w[k] + log_norm[k] - 0.5 * maha
            # comp = -L^{-T} y
            for c in range(d):
                acc = 0.0
                for r in range(c, d):
                    acc += inv_chol[k, r, c] * y[k, r]
                comp[k, c] = -acc
        lp = _nb_row_logsumexp(a)
        logp[i] = lp
        for k in range(K):
            rk = math.exp(a[k] - lp)
            if rk == 0.0:
                continue
            for c in range(d):
                score[i, c] += rk * comp[k, c]
            if want_hvp:
                cdot = 0.0
                for c in range(d):
                    cdot += comp[k, c] * v[i, c]
                for r in range(d):
                    acc = 0.0
                    for c in range(r + 1):
                        acc += inv_chol[k, r, c] * v[i, c]
                    lv[r] = acc
                for c in range(d):
                    acc = 0.0
                    for r in range(c, d):
                        acc += inv_chol[k, r, c] * lv[r]
                    hv[i, c] += rk * (comp[k, c] * cdot - acc)
        if want_hvp:
            sdot = 0.0
            for c in range(d):
                sdot += score[i, c] * v[i, c]
            for c in range(d):
                hv[i, c] -= score[i, c] * sdot
    return logp, score, hv


def _nb_mixture_score(x, log_w, means, inv_chol, log_norm):
    logp, score, _ = _nb_score_core(x, x, log_w, means, inv_chol, log_norm, False)
    return logp, score


def _nb_mixture_score_hvp(x, v, log_w, means, inv_chol, log_norm):
    return _nb_score_core(x, v, log_w, means, inv_chol, log_norm, True)[2]


NUMPY_KERNELS = {
    "component_log_prob": _np_component_log_prob,
    "mixture_logpdf": _np_mixture_logpdf,
    "mixture_responsibilities": _np_mixture_responsibilities,
    "mixture_score": _np_mixture_score,
    "mixture_score_hvp": _np_mixture_score_hvp,
}

NUMBA_KERNELS = (
    {
        "component_log_prob": _nb_component_log_prob,
        "mixture_logpdf": _nb_mixture_logpdf,
        "mixture_responsibilities": _nb_mixture_responsibilities,
        "mixture_score": _nb_mixture_score,
        "mixture_score_hvp": _nb_mixture_score_hvp,
    }
    if NUMBA_AVAILABLE
    else None
)

_ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS

component_log_prob = _ACTIVE["component_log_prob"]
mixture_logpdf = _ACTIVE["mixture_logpdf"]
mixture_responsibilities = _ACTIVE["mixture_responsibilities"]
mixture_score = _ACTIVE["mixture_score"]
mixture_score_hvp = _ACTIVE["mixture_score_hvp"]
