"""Experiment drivers behind the CLI: paired runs, KL diagnostics and sweeps.

Every run ``i`` uses solver seed ``base_seed + i`` for both arms, and its
ground truth is drawn from ``default_rng([truth_seed, i])``. The base arm is
the configured solver with the corrector disabled; since the corrector owns
a separate generator stream the two arms share all solver noise.
"""

from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
import csv
import hashlib
import itertools
import json
import logging
import time

import numpy as np

from . import __version__
from .config import ConfigError, config_hash, dump_config, parse_config
from .diagnostics import (MetricReport, kl_gap_curve, psnr, psnr_histogram, write_json, y_psnr)
from .measurement import make_measurement, residual
from .prior import sample
from .schedule import NonFiniteStateError
from .solvers import SolverDivergenceError, solve
from .svg import LinePlot

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA = "mclc-lab/run-manifest"
MANIFEST_VERSION = 1
KL_TRUTH_STREAM = 1_000_003
HIST_EDGES = np.arange(0.0, 61.0, 5.0)

__all__ = ["run_experiment", "run_kl_diagnostic", "run_sweep", "parse_grid", "make_truth", "file_sha256"]


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def make_truth(cfg, prior, op, dec, stream, n=1):
    """Ground-truth latents and their noisy observation for one run (or a batch)."""
    rng = np.random.default_rng([cfg.task.truth_seed, stream])
    z_true = sample(prior, n, rng)
    if n == 1:
        z_true = z_true[0]
    return make_measurement(op, dec, z_true, cfg.task.noise_sigma, rng)


def _arms(cfg):
    full = cfg.solver_config
    base = full.without_correctors()
    return (("base", base), ("corrected", full)) if full.any_corrector else (("base", base),)


def _single_run(cfg, index, out_dir, dump_latents):
    """One paired run; returns a plain dict so it can cross process boundaries."""
    sched, prior, op, dec = cfg.build()
    meas = make_truth(cfg, prior, op, dec, index)
    seed = cfg.run.base_seed + index
    run_dir = Path(out_dir) / f"run_{index:03d}"
    run_dir.mkdir(parents=True, exist_ok=True)
    out = {"index": index, "seed": seed, "arms": {}, "artifacts": [], "status": "ok"}
    t0 = time.perf_counter()
    for arm, scfg in _arms(cfg):
        try:
            res = solve(scfg, meas, prior, dec, sched, seed=seed)
        except (NonFiniteStateError, SolverDivergenceError) as exc:
            out["status"] = "failed"
            out["error"] = f"{arm}: {exc}"
            break
        path = run_dir / f"trajectory_{arm}.csv"
        res.trajectory.write_csv(path)
        out["artifacts"].append(str(path))
        if dump_latents:
            lpath = run_dir / f"latents_{arm}.csv"
            res.trajectory.write_latents(lpath)
            out["artifacts"].append(str(lpath))
        peak = float(np.ptp(meas.ground_truth)) or 1.0
        out["arms"][arm] = {
            "psnr": psnr(meas.ground_truth, res.x_hat, peak),
            "y_psnr": y_psnr(meas, res.x_hat),
            "terminal_residual": residual(res.z0, meas, dec),
        }
    out["wall_clock_s"] = time.perf_counter() - t0
    return out


def _rel(paths, root):
    return [str(Path(p).relative_to(root)) for p in paths]


def _write_manifest(root, cfg, seeds, artifacts, wall, status, errors=(), runs=None):
    root = Path(root)
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "version": MANIFEST_VERSION,
        "tool_version": __version__,
        "config_hash": config_hash(cfg),
        "seeds": list(seeds),
        "status": status,
        "errors": list(errors),
        "artifacts": {p: file_sha256(root / p) for p in sorted(artifacts)},
        "wall_clock_s": wall,
    }
    if runs is not None:
        manifest["runs"] = runs
    write_json(manifest, root / "manifest.json")
    return manifest


def run_experiment(cfg, out_dir, jobs=None, dump_latents=None):
    """Run ``cfg.run.n_runs`` paired experiments and write all artifacts.

    Args:
        cfg: :class:`~mclc_lab.config.ExperimentConfig`.
        out_dir: output directory (created).
        jobs: worker processes; defaults to ``cfg.run.jobs``.
        dump_latents: write per-step latents; defaults to ``cfg.run.dump_latents``.

    Returns:
        The manifest dict; ``manifest["status"]`` is ``"failed"`` if any run
        hit a non-finite state or diverged.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    jobs = cfg.run.jobs if jobs is None else jobs
    dump = cfg.run.dump_latents if dump_latents is None else dump_latents
    dump_config(cfg, root / "config.yaml")
    idx = list(range(cfg.run.n_runs))
    if jobs > 1 and len(idx) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_single_run, [cfg] * len(idx), idx, [str(root)] * len(idx), [dump] * len(idx)))
    else:
        results = [_single_run(cfg, i, root, dump) for i in idx]
    artifacts = ["config.yaml"]
    for r in results:
        artifacts += _rel(r["artifacts"], root)
    errors = [f"run {r['index']}: {r['error']}" for r in results if r["status"] != "ok"]
    for arm in ("base", "corrected"):
        rows = [r["arms"][arm] for r in results if arm in r["arms"]]
        if not rows:
            continue
        p = [row["psnr"] for row in rows]
        rep = MetricReport(psnr=p, y_psnr=[row["y_psnr"] for row in rows],
                           terminal_residual=[row["terminal_residual"] for row in rows],
                           label=arm, histogram=psnr_histogram(p, HIST_EDGES))
        rep.write_json(root / f"metrics_{arm}.json")
        rep.write_csv(root / f"metrics_{arm}.csv")
        artifacts += [f"metrics_{arm}.json", f"metrics_{arm}.csv"]
    status = "failed" if errors else "ok"
    for e in errors:
        logger.error(e)
    wall = {str(r["index"]): r["wall_clock_s"] for r in results}
    runs = [{"index": r["index"], "seed": r["seed"], "status": r["status"], "metrics": r["arms"]} for r in results]
    return _write_manifest(root, cfg, [r["seed"] for r in results], artifacts, wall, status, errors, runs)


def run_kl_diagnostic(cfg, out_dir, reproducible=False):
    """Paired trajectory ensembles and the KL gap curve (JSON, CSV and SVG)."""
    dg = cfg.diagnostics
    if dg.kl_stride % cfg.solver.record_stride:
        raise ConfigError([f"solver.record_stride ({cfg.solver.record_stride}) must divide "
                           f"diagnostics.kl_stride ({dg.kl_stride})"])
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, root / "config.yaml")
    sched, prior, op, dec = cfg.build()
    meas = make_truth(cfg, prior, op, dec, KL_TRUTH_STREAM, n=dg.n_trajectories)
    scfg = cfg.solver_config
    base_cfg = scfg.without_correctors()
    t0 = time.perf_counter()
    base = solve(base_cfg, meas, prior, dec, sched, seed=cfg.run.base_seed)
    if scfg.any_corrector:
        corr = solve(scfg, meas, prior, dec, sched, seed=cfg.run.base_seed)
    else:
        logger.warning("no corrector configured: the corrected curve repeats the base ensemble")
        corr = base
    report = kl_gap_curve(base.trajectory, corr.trajectory, prior, sched, stride=dg.kl_stride,
                          gmm_components=dg.gmm_components, mc_samples=dg.mc_samples,
                          mode=dg.reference_mode, rng=np.random.default_rng([cfg.run.base_seed, 1]))
    report.write_json(root / "kl_report.json")
    report.write_csv(root / "kl_report.csv")
    kl_plot(report).save(root / "kl_report.svg", reproducible=reproducible)
    artifacts = ["config.yaml", "kl_report.json", "kl_report.csv", "kl_report.svg"]
    manifest = _write_manifest(root, cfg, [cfg.run.base_seed], artifacts,
                               {"kl": time.perf_counter() - t0}, "ok")
    return report, manifest


def kl_plot(report):
    t = np.asarray(report.timesteps, dtype=float)
    plot = LinePlot(title="KL to the time marginal", xlabel="level t", ylabel="KL (nats)")
    for name, kl, se in (("base", report.kl_base, report.se_base),
                         ("corrected", report.kl_corrected, report.se_corrected)):
        kl, se = np.asarray(kl), np.asarray(se)
        plot.add(t, kl, label=name, band=(kl - se, kl + se))
    return plot


def parse_grid(items, cfg_raw=None):
    """``path=v1,v2`` strings to ``{path: [values]}``.

    A value written ``*f`` multiplies the configured value of ``path``
    (looked up in ``cfg_raw``), so ``solver.zeta=*0.5,*1,*2`` scales zeta.
    """
    import yaml

    grid = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError([f"grid entry {item!r}: expected path=v1,v2,..."])
        path, text = item.split("=", 1)
        vals = []
        for tok in text.split(","):
            tok = tok.strip()
            if tok.startswith("*"):
                base = _lookup(cfg_raw, path)
                if not isinstance(base, (int, float)):
                    raise ConfigError([f"grid entry {path}: cannot scale a non-numeric value"])
                vals.append(base * float(tok[1:]))
            else:
                vals.append(yaml.safe_load(tok))
        grid[path.strip()] = vals
    return grid


def _lookup(raw, path):
    cur = raw
    for p in path.split("."):
        if not isinstance(cur, dict) or p not in cur:
            raise ConfigError([f"grid entry {path}: no such field"])
        cur = cur[p]
    return cur


def run_sweep(cfg, grid, out_dir, jobs=None):
    """Cross product of ``grid`` values; one aggregated CSV row per (point, run).

    Each row carries the metrics of both arms (``psnr_base``,
    ``psnr_corrected``, ...); corrected columns are empty when the point has
    no corrector. Every grid point is validated before any run starts.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    raw = cfg.to_dict()
    keys = list(grid)
    points = list(itertools.product(*(grid[k] for k in keys))) or [()]
    configs, errors = [], []
    for pt in points:
        overrides = [f"{k}={json.dumps(v)}" for k, v in zip(keys, pt)]
        try:
            configs.append(parse_config(raw, overrides=overrides))
        except ConfigError as exc:
            errors += exc.errors
    if errors:
        raise ConfigError(list(dict.fromkeys(errors)))
    path = root / "sweep.csv"
    metrics = ("psnr", "y_psnr", "terminal_residual")
    cols = [f"{m}_{arm}" for arm in ("base", "corrected") for m in metrics]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["point"] + keys + ["run", "seed", "status"] + cols)
        for p_idx, (pt, c) in enumerate(zip(points, configs)):
            man = run_experiment(c, root / f"point_{p_idx:03d}", jobs=jobs)
            for run in man["runs"]:
                vals = []
                for arm in ("base", "corrected"):
                    m = run["metrics"].get(arm)
                    vals += [repr(m[k]) if m else "" for k in metrics]
                w.writerow([p_idx] + list(pt) + [run["index"], run["seed"], run["status"]] + vals)
    return path
