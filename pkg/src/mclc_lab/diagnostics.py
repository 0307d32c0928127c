"""Distribution-gap and reconstruction diagnostics.

KL gaps are estimated by fitting Gaussian mixtures to solver states and to
reference draws from the exact time marginal, then Monte-Carlo integrating
``log q - log p`` under the fitted ``q``. Every estimate carries a standard
error, and a null curve (fit to a second, independent reference set) shows
the bias floor that finite-sample fitting alone produces.
"""

from dataclasses import dataclass, field, asdict
import csv
import json
import logging
import math

import numpy as np

from . import kernels
from .prior import GmmPrior, marginal_at, sample, log_density, score
from .schedule import ddim_invert

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
REFERENCE_MODES = ("exact_marginal", "ddim_inversion")

__all__ = [
    "fit_gmm_em",
    "EmNotMonotoneError",
    "mc_kl",
    "kl_gap_curve",
    "KlReport",
    "MetricReport",
    "psnr",
    "y_psnr",
    "psnr_histogram",
    "metric_report",
]


class EmNotMonotoneError(RuntimeError):
    pass


def _kmeanspp(x, k, rng):
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _floor_cov(c, reg):
    c = 0.5 * (c + np.swapaxes(c, -1, -2))
    w, v = np.linalg.eigh(c)
    return (v * np.maximum(w, reg)[..., None, :]) @ np.swapaxes(v, -1, -2)


def _m_step(x, resp, reg):
    nk = resp.sum(axis=0) + 10 * np.finfo(float).tiny
    weights = nk / nk.sum()
    means = (resp.T @ x) / nk[:, None]
    diff = x[None, :, :] - means[:, None, :]
    covs = np.einsum("nk,kni,knj->kij", resp, diff, diff) / nk[:, None, None]
    return weights, means, _floor_cov(covs, reg)


def fit_gmm_em(samples, n_components=32, max_iters=500, seed=0, tol=1e-8, reg=1e-6, return_history=False, n_init=1):
    """Maximum-likelihood Gaussian mixture by EM.

    Initialised from a k-means++ seeding followed by one hard assignment;
    with ``n_init > 1`` EM is restarted from independent seedings and the
    fit with the highest final log-likelihood is kept.

    Covariance eigenvalues are clamped at ``reg``, which is the exact
    maximiser over ``{Sigma >= reg I}`` and so keeps EM monotone; the
    mean log-likelihood is checked for monotonicity every iteration.

    Args:
        samples: ``(n, d)`` array with ``n >= n_components``.
        n_components: mixture size.
        max_iters: EM iteration budget.
        seed: seed for the initialisation.
        tol: stop when the mean log-likelihood changes by less than this.
        reg: covariance eigenvalue floor.
        return_history: also return the per-iteration mean log-likelihood
            (of the kept fit).
        n_init: number of independent initialisations.
    """
    x = np.ascontiguousarray(np.asarray(samples, dtype=float))
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("samples must be a non-empty (n, d) array")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples contain non-finite values")
    n, d = x.shape
    if n < n_components:
        raise ValueError(f"need at least {n_components} samples, got {n}")
    if n_components > 1 and np.all(np.ptp(x, axis=0) == 0):
        raise ValueError("degenerate sample set: all samples coincide")
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    best = None
    for child in np.random.SeedSequence(seed).spawn(n_init) if n_init > 1 else [seed]:
        gmm, history = _em_once(x, n_components, max_iters, np.random.default_rng(child), tol, reg)
        if best is None or history[-1] > best[1][-1]:
            best = (gmm, history)
    return best if return_history else best[0]


def _em_once(x, n_components, max_iters, rng, tol, reg):
    n = x.shape[0]
    centers = _kmeanspp(x, n_components, rng)
    labels = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    resp = np.zeros((n, n_components))
    resp[np.arange(n), labels] = 1.0
    weights, means, covs = _m_step(x, resp, reg)
    history = []
    for _ in range(max_iters):
        gmm = GmmPrior(weights, means, covs)
        logp, resp = kernels.mixture_responsibilities(x, *gmm.kernel_args)
        ll = float(np.mean(logp))
        if history and ll < history[-1] - 1e-9 * max(1.0, abs(history[-1])):
            raise EmNotMonotoneError(f"EM log-likelihood decreased from {history[-1]!r} to {ll!r}")
        history.append(ll)
        if len(history) > 1 and abs(history[-1] - history[-2]) < tol:
            break
        weights, means, covs = _m_step(x, resp, reg)
    return GmmPrior(weights, means, covs), history


def mc_kl(q, p, n, rng):
    """Monte-Carlo ``KL(q || p)`` with draws from ``q``; returns ``(estimate, se)``.

    ``se`` is infinite for ``n == 1``.
    """
    if q.d != p.d:
        raise ValueError("dimension mismatch")
    n = int(n)
    if n < 1:
        raise ValueError("n must be >= 1")
    x = sample(q, n, rng)
    diff = np.atleast_1d(log_density(q, x) - log_density(p, x))
    if not np.all(np.isfinite(diff)):
        raise FloatingPointError("non-finite log-density in KL estimate")
    se = float(np.std(diff, ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return float(np.mean(diff)), se


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return v
    return v


def write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class KlReport:
    """KL of solver state distributions against the reference marginal.

    ``kl_null`` is the KL between fits to two independent reference sets of
    the same size as the solver ensemble: the bias floor of the protocol.
    """

    timesteps: list
    kl_base: list
    se_base: list
    kl_corrected: list
    se_corrected: list
    kl_null: list
    se_null: list
    n_trajectories: int
    gmm_components: int
    reference_mode: str
    mc_samples: int

    def __post_init__(self):
        n = len(self.timesteps)
        for name in ("kl_base", "se_base", "kl_corrected", "se_corrected", "kl_null", "se_null"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} is not aligned with timesteps")
        if not all(np.isfinite(self.kl_base + self.kl_corrected + self.kl_null)):
            raise ValueError("KL estimates must be finite")

    @property
    def gap(self):
        return np.asarray(self.kl_base) - np.asarray(self.kl_corrected)

    @property
    def gap_se(self):
        return np.hypot(self.se_base, self.se_corrected)

    def summary(self):
        kb, kc = np.asarray(self.kl_base), np.asarray(self.kl_corrected)
        mean_b, mean_c = kb.mean(), kc.mean()
        n = len(kb)
        se_mb = math.sqrt(np.sum(np.square(self.se_base))) / n
        se_mc = math.sqrt(np.sum(np.square(self.se_corrected))) / n
        return {
            "fraction_improved": float(np.mean(kc <= kb)),
            "fraction_improved_3se": float(np.mean(self.gap > 3 * self.gap_se)),
            "mean_kl_base": float(mean_b),
            "mean_kl_corrected": float(mean_c),
            "mean_reduction": float((mean_b - mean_c) / mean_b) if mean_b > 0 else 0.0,
            "mean_gap_se": math.hypot(se_mb, se_mc),
        }

    def to_dict(self):
        d = asdict(self)
        return {"schema": "mclc-lab/kl-report", "version": SCHEMA_VERSION, **d}

    def write_json(self, path):
        write_json(self.to_dict(), path)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "kl_base", "se_base", "kl_corrected", "se_corrected", "kl_null", "se_null"])
            for row in zip(self.timesteps, self.kl_base, self.se_base, self.kl_corrected,
                           self.se_corrected, self.kl_null, self.se_null):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def _as_trajectories(runs):
    return list(runs) if isinstance(runs, (list, tuple)) else [runs]


def _collect(runs, attr):
    """Map ``level -> stacked states`` from one or more (batched) trajectories."""
    out = {}
    for traj in _as_trajectories(runs):
        for step in traj.steps:
            out.setdefault(step.level, []).append(np.atleast_2d(getattr(step, attr)))
    return {lv: np.concatenate(v) for lv, v in out.items()}


def _ddim_references(prior, sched, levels, n, rng, refine=2):
    z0 = sample(prior, n, rng)
    want = set(levels)
    got = {lv: z0 for lv in want if lv == 0}
    top = max(levels)
    if top > 0:
        fn = lambda z, t: score(marginal_at(prior, t, sched), z)
        for t, z in ddim_invert(z0, fn, sched, stride=1, t_stop=top, refine=refine):
            if t in want:
                got[t] = z
    return got


def kl_gap_curve(run_base, run_corrected, prior, sched, stride=15, gmm_components=8, mc_samples=100_000,
                 mode="exact_marginal", rng=None, n_reference=None, em_iters=500, n_init=1):
    """KL of base (``z_sharp``) and corrected (``z_corrected``) ensembles against ``p_t``.

    Args:
        run_base: trajectory or list of trajectories of the base solver.
        run_corrected: same for the corrected solver.
        prior: clean-latent prior defining the reference marginals.
        sched: diffusion schedule.
        stride: keep checkpoints whose step index is a multiple of ``stride``.
        gmm_components: mixture size of every fit.
        mc_samples: Monte-Carlo draws per KL estimate.
        mode: ``exact_marginal`` samples ``p_t`` directly, ``ddim_inversion``
            pushes prior draws forward with deterministic inversion.
        rng: Generator; checkpoints use independent child streams.
        n_reference: reference sample count (defaults to the ensemble size).
        em_iters: EM iteration budget per fit.
        n_init: EM restarts per fit (see :func:`fit_gmm_em`).
    """
    if mode not in REFERENCE_MODES:
        raise ValueError(f"mode must be one of {REFERENCE_MODES}")
    rng = np.random.default_rng(0) if rng is None else rng
    base = _collect(run_base, "z_sharp")
    corr = _collect(run_corrected, "z_corrected")
    step_of = {s.level: s.t for traj in _as_trajectories(run_base) for s in traj.steps}
    levels = sorted((lv for lv in base if lv in corr and step_of[lv] % stride == 0), reverse=True)
    if not levels:
        raise ValueError(f"no recorded checkpoints at stride {stride}")
    n_traj = min(base[levels[0]].shape[0], corr[levels[0]].shape[0])
    if n_traj < gmm_components:
        raise ValueError(f"{n_traj} trajectories cannot support {gmm_components} components")
    n_ref = n_traj if n_reference is None else int(n_reference)
    ref_seeds = rng.bit_generator.seed_seq.spawn(len(levels) + 1) if hasattr(rng.bit_generator, "seed_seq") else None
    if ref_seeds is None:
        ref_seeds = np.random.SeedSequence(int(rng.integers(2**63))).spawn(len(levels) + 1)
    if mode == "ddim_inversion":
        rr = np.random.default_rng(ref_seeds[-1])
        refs_a = _ddim_references(prior, sched, levels, n_ref, rr)
        refs_b = _ddim_references(prior, sched, levels, n_traj, rr)
    out = {k: [] for k in ("kb", "sb", "kc", "sc", "kn", "sn")}
    for i, lv in enumerate(levels):
        r = np.random.default_rng(ref_seeds[i])
        fit_seed = int(r.integers(2**31))
        if mode == "exact_marginal":
            p_t = marginal_at(prior, lv, sched)
            ref_a, ref_b = sample(p_t, n_ref, r), sample(p_t, n_traj, r)
        else:
            ref_a, ref_b = refs_a[lv], refs_b[lv]
        fit = lambda x: fit_gmm_em(x, gmm_components, em_iters, seed=fit_seed, n_init=n_init)
        p_fit = fit(ref_a)
        for key, x in (("b", base[lv]), ("c", corr[lv]), ("n", ref_b)):
            est, se = mc_kl(fit(x), p_fit, mc_samples, r)
            out["k" + key].append(est)
            out["s" + key].append(se)
        logger.debug("level %d: base %.4g corrected %.4g null %.4g", lv, out["kb"][-1], out["kc"][-1], out["kn"][-1])
    return KlReport(
        timesteps=[int(v) for v in levels], kl_base=out["kb"], se_base=out["sb"], kl_corrected=out["kc"],
        se_corrected=out["sc"], kl_null=out["kn"], se_null=out["sn"], n_trajectories=int(n_traj),
        gmm_components=int(gmm_components), reference_mode=mode, mc_samples=int(mc_samples),
    )


# ---------------------------------------------------------------------------
# reconstruction metrics
# ---------------------------------------------------------------------------


def psnr(x, x_hat, peak=1.0):
    """``10 log10(peak^2 d / |x - x_hat|^2)``; ``+inf`` for identical signals."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    x = np.asarray(x, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    if x.shape[-1] != x_hat.shape[-1]:
        raise ValueError("dimension mismatch")
    err = np.sum((x - x_hat) ** 2, axis=-1)
    d = x.shape[-1]
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(peak**2 * d / err)
    return float(out) if np.ndim(out) == 0 else out


def y_psnr(meas, x_hat, peak=None):
    """PSNR between ``y`` and ``A(x_hat)``; ``peak`` defaults to the range of each observation."""
    pred = meas.operator.apply(x_hat)
    if peak is None:
        peak = np.ptp(meas.y, axis=-1)
    peak = np.asarray(peak, dtype=float)
    if np.any(peak <= 0):
        raise ValueError("peak must be positive")
    err = np.sum((meas.y - pred) ** 2, axis=-1)
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(peak**2 * meas.y.shape[-1] / err)
    return float(out) if np.ndim(out) == 0 else out


def psnr_histogram(values, bin_edges):
    """Counts per bin; out-of-range values (including ``+inf``) go to the end bins."""
    edges = np.asarray(bin_edges, dtype=float)
    if edges.ndim != 1 or edges.size < 2:
        raise ValueError("need at least one bin")
    if np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")
    v = np.asarray(values, dtype=float).reshape(-1)
    if np.any(np.isnan(v)):
        raise ValueError("NaN values cannot be binned")
    idx = np.clip(np.searchsorted(edges, v, side="right") - 1, 0, edges.size - 2)
    counts = np.bincount(idx, minlength=edges.size - 1)
    return {"bin_edges": edges.tolist(), "counts": counts.astype(int).tolist()}


def _aggregate(v):
    v = np.asarray(v, dtype=float)
    fin = v[np.isfinite(v)]
    if fin.size == 0:
        return {"mean": math.nan, "median": math.nan, "std": math.nan, "n_infinite": int(v.size)}
    return {"mean": float(fin.mean()), "median": float(np.median(fin)), "std": float(fin.std()),
            "n_infinite": int(v.size - fin.size)}


@dataclass
class MetricReport:
    psnr: list
    y_psnr: list
    terminal_residual: list
    label: str = ""
    histogram: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.psnr) == len(self.y_psnr) == len(self.terminal_residual)):
            raise ValueError("per-run metric lists must have equal length")

    @property
    def aggregate(self):
        return {k: _aggregate(getattr(self, k)) for k in ("psnr", "y_psnr", "terminal_residual")}

    def to_dict(self):
        return {"schema": "mclc-lab/metric-report", "version": SCHEMA_VERSION, "label": self.label,
                "psnr": list(self.psnr), "y_psnr": list(self.y_psnr),
                "terminal_residual": list(self.terminal_residual),
                "aggregate": self.aggregate, "histogram": self.histogram}

    def write_json(self, path):
        write_json(self.to_dict(), path)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run", "psnr", "y_psnr", "terminal_residual"])
            for i, row in enumerate(zip(self.psnr, self.y_psnr, self.terminal_residual)):
                w.writerow([i] + [repr(float(v)) for v in row])


def metric_report(x_true, x_hat, meas, residuals, label="", bin_edges=None, peak=None):
    """Per-run PSNR, y-PSNR and residuals for a batch of reconstructions."""
    x_true = np.atleast_2d(x_true)
    x_hat = np.atleast_2d(x_hat)
    peak_x = float(np.ptp(x_true)) if peak is None else peak
    p = np.atleast_1d(psnr(x_true, x_hat, peak_x))
    yp = np.atleast_1d(y_psnr(meas, x_hat, peak))
    edges = np.arange(0.0, 61.0, 5.0) if bin_edges is None else bin_edges
    return MetricReport(
        psnr=[float(v) for v in p], y_psnr=[float(v) for v in yp],
        terminal_residual=[float(v) for v in np.atleast_1d(residuals)], label=label,
        histogram=psnr_histogram(p, edges),
    )
