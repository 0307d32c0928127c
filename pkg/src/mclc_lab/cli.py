"""Command-line interface: ``mclc-lab <subcommand>``.

Subcommands: run, kl-diag, verify, sweep, jacobian-probe, plot. Output goes
to ``--output`` if given, else ``run.output_dir`` from the config, else a
directory under ``$MCLC_LAB_OUTPUT_ROOT`` (default ``./mclc_runs``).
"""

from pathlib import Path
import argparse
import csv
import logging
import math
import sys

import numpy as np

from . import __version__
from .config import ConfigError, config_hash, default_output_root, load_config
from .diagnostics import SCHEMA_VERSION, psnr_histogram, write_json
from .svg import BarChart, LinePlot

logger = logging.getLogger("mclc_lab")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _add_config_args(p):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", type=Path, help="YAML experiment config")
    src.add_argument("--preset", help="name of a shipped preset (see `verify --list-presets`)")
    p.add_argument("--override", "-O", action="append", default=[], metavar="PATH=VALUE",
                   help="dotted config override, e.g. corrector.n_c=0 (repeatable)")
    p.add_argument("--output", "-o", type=Path, help="output directory")


def _load(args):
    if args.config is not None:
        if not args.config.is_file():
            raise ConfigError([f"config file {args.config} does not exist"])
        return load_config(args.config, args.override), args.config.stem
    from .presets import load_preset

    return load_preset(args.preset, args.override), args.preset


def _out_dir(args, cfg, name, kind):
    if args.output is not None:
        return args.output
    if cfg.run.output_dir:
        return Path(cfg.run.output_dir)
    return default_output_root() / f"{kind}-{name}-{config_hash(cfg)[:10]}"


def _parse_ints(text, n=None, what="value"):
    try:
        vals = [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{what} must be comma-separated integers")
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"{what} needs {n} integers")
    return vals


def _parse_floats(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated numbers")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_run(args):
    from .runner import run_experiment

    cfg, name = _load(args)
    out = _out_dir(args, cfg, name, "run")
    manifest = run_experiment(cfg, out, jobs=args.jobs, dump_latents=args.dump_latents or None)
    print(f"{manifest['status']}: {cfg.run.n_runs} run(s) written to {out}")
    for e in manifest["errors"]:
        print(f"  {e}", file=sys.stderr)
    return EXIT_OK if manifest["status"] == "ok" else EXIT_FAILED


def cmd_kl_diag(args):
    from dataclasses import replace

    from .runner import run_kl_diagnostic

    cfg, name = _load(args)
    if args.trajectories:
        cfg = replace(cfg, diagnostics=replace(cfg.diagnostics, n_trajectories=args.trajectories))
    if args.stride:
        cfg = replace(cfg, diagnostics=replace(cfg.diagnostics, kl_stride=args.stride))
        if args.stride % cfg.solver.record_stride:
            cfg = replace(cfg, solver=replace(cfg.solver, record_stride=args.stride))
    out = _out_dir(args, cfg, name, "kl")
    report, _ = run_kl_diagnostic(cfg, out, reproducible=args.reproducible)
    sm = report.summary()
    print(f"KL report written to {out}")
    print(f"  checkpoints {len(report.timesteps)}; improved at {sm['fraction_improved']:.0%} "
          f"({sm['fraction_improved_3se']:.0%} by > 3 SE); mean reduction {sm['mean_reduction']:.1%}")
    return EXIT_OK


def cmd_verify(args):
    from .acceptance import CRITERIA, run_criterion

    if args.list:
        for key, (title, _, limit) in CRITERIA.items():
            print(f"{key:<12} {title} (limit {limit:g}s)")
        return EXIT_OK
    if args.list_presets:
        from .presets import preset_names

        print("\n".join(preset_names()))
        return EXIT_OK
    keys = args.only or list(CRITERIA)
    unknown = [k for k in keys if k not in CRITERIA]
    if unknown:
        print(f"unknown criteria: {', '.join(unknown)}; available: {', '.join(CRITERIA)}", file=sys.stderr)
        return EXIT_USAGE
    results = []
    for key in keys:
        r = run_criterion(key)
        results.append(r)
        flag = "" if r.within_runtime else "  [over runtime limit]"
        print(r.line() + flag, flush=True)
    n_pass = sum(r.passed for r in results)
    print(f"{n_pass}/{len(results)} criteria passed")
    if args.json:
        write_json({"schema": "mclc-lab/verdict", "version": SCHEMA_VERSION, "tool_version": __version__,
                    "passed": n_pass == len(results), "results": [r.to_dict() for r in results]}, args.json)
    return EXIT_OK if n_pass == len(results) else EXIT_FAILED


def cmd_sweep(args):
    from .runner import parse_grid, run_sweep

    cfg, name = _load(args)
    grid = parse_grid(args.grid, cfg.to_dict())
    out = _out_dir(args, cfg, name, "sweep")
    path = run_sweep(cfg, grid, out, jobs=args.jobs)
    print(f"sweep table written to {path}")
    return EXIT_OK


def cmd_jacobian_probe(args):
    from .measurement import (IdentityDecoder, SmoothMapDecoder, amplification_ratio, grid_region_indices,
                              inject_scaled_outlier, make_decoder, principal_jacobian_direction)
    from .prior import circle_prior, sample

    h, w = args.latent_grid or (4, 4)
    d = h * w
    if args.config is not None or args.preset is not None:
        cfg, _ = _load(args)
        dec = make_decoder(cfg.task.decoder, cfg.prior.d)
        d = dec.latent_dim
        if args.latent_grid is None:
            h = max(f for f in range(1, int(math.isqrt(d)) + 1) if d % f == 0)
            w = d // h
        if d != h * w:
            print(f"latent grid {h}x{w} does not match the config's latent dimension {d}", file=sys.stderr)
            return EXIT_USAGE
    elif args.decoder == "identity":
        dec = IdentityDecoder(d)
    else:
        dec = SmoothMapDecoder(d, hidden=args.hidden, signal_dim=args.signal_dim, seed=args.decoder_seed)
    if isinstance(dec, IdentityDecoder):
        print("jacobian-probe needs a smooth_map decoder: the identity decoder has J J^T = I, "
              "so there is nothing to probe", file=sys.stderr)
        return EXIT_USAGE
    rng = np.random.default_rng(args.z_seed)
    if args.z_source == "prior":
        z = sample(circle_prior(d), 1, rng)[0]
    elif args.z_source == "gaussian":
        z = rng.standard_normal(d)
    else:
        z = np.zeros(d)
    region = tuple(args.region)
    idx = grid_region_indices((h, w), region)
    scales = args.scales if 1.0 in args.scales else [1.0] + args.scales
    oracle = args.oracle and d <= 32
    if args.oracle and not oracle:
        logger.warning("dense cross-check skipped: latent dimension %d exceeds 32", d)
    out = args.output or default_output_root() / f"jacobian-probe-seed{args.decoder_seed}"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in scales:
        zs = inject_scaled_outlier(z, (h, w), region, s)
        eig = principal_jacobian_direction(dec, zs, seed=args.decoder_seed)
        row = {"scale": s, "ratio": amplification_ratio(dec, zs, idx), "top_eigenvalue": eig.value,
               "converged": eig.converged}
        if oracle:
            J = dec.jacobian(zs)
            dense = float(np.linalg.eigvalsh(J @ J.T)[-1])
            row["dense_top_eigenvalue"] = dense
            row["relative_error"] = abs(eig.value - dense) / dense
        rows.append(row)
    with open(out / "jacobian_probe.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    chart = BarChart(title="Jacobian amplification of the outlier block", xlabel="scale", ylabel="ratio")
    for r in rows:
        chart.add(f"{r['scale']:g}", r["ratio"])
    chart.save(out / "jacobian_probe.svg", reproducible=args.reproducible)
    for r in rows:
        extra = f"; dense {r['dense_top_eigenvalue']:.6g} (rel. err {r['relative_error']:.1e})" if oracle else ""
        print(f"scale {r['scale']:g}: ratio {r['ratio']:.4g}; top eigenvalue {r['top_eigenvalue']:.6g}{extra}")
    print(f"probe written to {out}")
    return EXIT_OK


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} has no data rows")
    return rows


def _floats(rows, key):
    return np.array([float(r[key]) if r[key] not in ("", None) else np.nan for r in rows])


def _detect_kind(header):
    if "kl_base" in header:
        return "kl"
    if "residual_sharp" in header:
        return "trajectory"
    if "point" in header and "psnr_base" in header:
        return "sweep"
    if "psnr" in header:
        return "metrics"
    raise ValueError("cannot infer the plot kind from the CSV header; pass --kind")


def cmd_plot(args):
    rows = _read_csv(args.input)
    kind = args.kind if args.kind != "auto" else _detect_kind(rows[0].keys())
    if kind == "kl":
        t = _floats(rows, "t")
        plot = LinePlot(title="KL to the time marginal", xlabel="level t", ylabel="KL (nats)")
        for name in ("base", "corrected"):
            kl, se = _floats(rows, f"kl_{name}"), _floats(rows, f"se_{name}")
            plot.add(t, kl, label=name, band=(kl - se, kl + se))
    elif kind == "trajectory":
        t = _floats(rows, "t")
        steps = np.unique(t)[::-1]
        plot = LinePlot(title="Residual along the trajectory", xlabel="step t", ylabel="mean residual")
        for col in ("residual_sharp", "residual_corrected"):
            v = _floats(rows, col)
            plot.add(steps, [np.nanmean(v[t == s]) for s in steps], label=col.split("_", 1)[1])
    elif kind == "sweep":
        point = _floats(rows, "point")
        pts = np.unique(point)
        plot = LinePlot(title="Sweep", xlabel="grid point", ylabel="mean PSNR (dB)")
        for arm in ("base", "corrected"):
            ps = _floats(rows, f"psnr_{arm}")
            means = [np.mean(ps[(point == p) & np.isfinite(ps)]) if np.any((point == p) & np.isfinite(ps))
                     else np.nan for p in pts]
            if np.any(np.isfinite(means)):
                plot.add(pts, means, label=arm)
    elif kind == "metrics":
        hist = psnr_histogram(_floats(rows, "psnr"), np.arange(0.0, 61.0, 5.0))
        plot = BarChart(title="PSNR histogram", xlabel="PSNR bin (dB)", ylabel="runs")
        for lo, c in zip(hist["bin_edges"][:-1], hist["counts"]):
            plot.add(f"{lo:g}", c)
    else:
        raise ValueError(f"unknown plot kind {kind!r}")
    out = args.output or Path(args.input).with_suffix(".svg")
    plot.save(out, reproducible=args.reproducible)
    print(f"{kind} plot written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="mclc-lab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="paired base/corrected runs with trajectory CSVs and metrics")
    _add_config_args(r)
    r.add_argument("--jobs", type=int, default=None, help="worker processes (default: run.jobs)")
    r.add_argument("--dump-latents", action="store_true", help="also write per-step latents")
    r.set_defaults(func=cmd_run)

    k = sub.add_parser("kl-diag", help="KL gap curve between base and corrected trajectory ensembles")
    _add_config_args(k)
    k.add_argument("--trajectories", type=int, default=None, help="override diagnostics.n_trajectories")
    k.add_argument("--stride", type=int, default=None,
                   help="checkpoint spacing in steps (default: diagnostics.kl_stride, 15)")
    k.add_argument("--reproducible", action="store_true", help="omit the SVG timestamp")
    k.set_defaults(func=cmd_kl_diag)

    v = sub.add_parser("verify", help="run the acceptance suite")
    v.add_argument("--only", nargs="+", metavar="KEY", help="run only these criteria")
    v.add_argument("--json", type=Path, help="write the verdict as JSON")
    v.add_argument("--list", action="store_true", help="list criteria and exit")
    v.add_argument("--list-presets", action="store_true", help="list shipped presets and exit")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("sweep", help="grid over config fields; one aggregated CSV")
    _add_config_args(s)
    s.add_argument("--grid", "-g", action="append", default=[], metavar="PATH=V1,V2",
                   help="grid axis; '*f' scales the configured value, e.g. solver.zeta=*0.5,*1,*2")
    s.add_argument("--jobs", type=int, default=None)
    s.set_defaults(func=cmd_sweep)

    j = sub.add_parser("jacobian-probe", help="scaled-outlier amplification and top eigenpair of J J^T")
    src = j.add_mutually_exclusive_group()
    src.add_argument("--config", type=Path, help="take the decoder from this config")
    src.add_argument("--preset", help="take the decoder from this preset")
    j.add_argument("--override", "-O", action="append", default=[], metavar="PATH=VALUE")
    j.add_argument("--decoder", choices=("smooth_map", "identity"), default="smooth_map")
    j.add_argument("--decoder-seed", type=int, default=0)
    j.add_argument("--latent-grid", type=lambda t: _parse_ints(t.replace("x", ","), 2, "--latent-grid"),
                   default=None, metavar="HxW",
                   help="latent layout; defaults to 4x4, or the most square factorisation of a config's d")
    j.add_argument("--hidden", type=int, default=None)
    j.add_argument("--signal-dim", type=int, default=None)
    j.add_argument("--z-source", choices=("prior", "gaussian", "zeros"), default="gaussian")
    j.add_argument("--z-seed", type=int, default=0)
    j.add_argument("--region", type=lambda t: _parse_ints(t, 4, "--region"), default=[0, 2, 0, 2],
                   metavar="R0,R1,C0,C1")
    j.add_argument("--scales", type=_parse_floats, default=[1.0, 2.0, 5.0, 10.0])
    j.add_argument("--oracle", action="store_true", help="cross-check against a dense eigensolver (d <= 32)")
    j.add_argument("--output", "-o", type=Path)
    j.add_argument("--reproducible", action="store_true")
    j.set_defaults(func=cmd_jacobian_probe)

    pl = sub.add_parser("plot", help="SVG from a KL, trajectory, sweep or metrics CSV")
    pl.add_argument("input", type=Path)
    pl.add_argument("--kind", choices=("auto", "kl", "trajectory", "sweep", "metrics"), default="auto")
    pl.add_argument("--output", "-o", type=Path)
    pl.add_argument("--reproducible", action="store_true")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print("configuration error:", file=sys.stderr)
        for e in exc.errors:
            print(f"  - {e}", file=sys.stderr)
        return EXIT_USAGE
    except (KeyError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
