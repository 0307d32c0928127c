"""Shipped experiment presets.

Corrector hyperparameters per solver and task follow the published
per-task tables (:data:`REFERENCE_TABLES`); the tasks themselves are 1-D
analogues at ``d = 8``. The YAML files under ``presets/`` are generated by
:func:`write_presets` and are what the CLI loads.
"""

from importlib import resources
from pathlib import Path
import copy

import yaml

from .config import load_config, parse_config

__all__ = ["REFERENCE_TABLES", "TASKS", "ZETA", "preset_names", "preset_path", "load_preset", "preset_dict", "write_presets"]

# Columns: inpaint, sr, gdeblur, mdeblur, hdr, nonlinear_deblur.
REFERENCE_TABLES = {
    "ldps": {
        "inpaint": {"k": 15, "n_c": 3, "lambda": 0.07},
        "sr": {"k": 15, "n_c": 3, "lambda": 0.15},
        "gdeblur": {"k": 10, "n_c": 3, "lambda": 0.27},
        "mdeblur": {"k": 10, "n_c": 3, "lambda": 0.27},
    },
    "psld": {
        "inpaint": {"k": 15, "n_c": 3, "lambda": 0.07},
        "sr": {"k": 15, "n_c": 3, "lambda": 0.15},
        "gdeblur": {"k": 10, "n_c": 3, "lambda": 0.27},
        "mdeblur": {"k": 10, "n_c": 3, "lambda": 0.27},
    },
    "resample": {
        "inpaint": {"k": 5, "n_c": 3, "lambda": 0.15, "n_c_dps": 1, "lambda_dps": 0.05},
        "sr": {"k": 5, "n_c": 3, "lambda": 0.15, "n_c_dps": 1, "lambda_dps": 0.15},
        "gdeblur": {"k": 10, "n_c": 5, "lambda": 0.15, "n_c_dps": 1, "lambda_dps": 0.15},
        "mdeblur": {"k": 10, "n_c": 5, "lambda": 0.15, "n_c_dps": 1, "lambda_dps": 0.15},
        "hdr": {"k": 5, "n_c": 3, "lambda": 0.15, "n_c_dps": 1, "lambda_dps": 0.10},
        "nonlinear_deblur": {"k": 5, "n_c": 3, "lambda": 0.07, "n_c_dps": 1, "lambda_dps": 0.07},
    },
    "latent_daps": {
        "inpaint": {"k": 5, "n_c": 3, "lambda": 0.10, "n_c_int": 1, "lambda_int": 0.15},
        "sr": {"k": 5, "n_c": 3, "lambda": 0.15, "n_c_int": 0, "lambda_int": 0.0},
        "gdeblur": {"k": 5, "n_c": 3, "lambda": 0.10, "n_c_int": 1, "lambda_int": 0.15},
        "mdeblur": {"k": 5, "n_c": 3, "lambda": 0.15, "n_c_int": 3, "lambda_int": 0.15},
        "hdr": {"k": 5, "n_c": 3, "lambda": 0.10, "n_c_int": 1, "lambda_int": 0.15},
        "nonlinear_deblur": {"k": 5, "n_c": 1, "lambda": 0.10, "n_c_int": 1, "lambda_int": 0.15},
    },
}

# Linear tasks with desk-scale analogues (HDR and nonlinear deblur have none).
TASKS = {
    "inpaint": {"kind": "mask", "p": 0.5, "seed": 0},
    "sr": {"kind": "average_downsample", "factor": 2},
    "gdeblur": {"kind": "circular_blur", "width": 5, "std": 1.0},
    "mdeblur": {"kind": "circular_blur", "kernel": [0.2, 0.2, 0.2, 0.2, 0.2]},
}

# Measurement step scale per task, calibrated once with LDPS on the d = 8
# circle prior (100 chains, zeta in {0.1, 0.3, 0.5, 1, 2}); every task
# diverges at 2, so the largest value keeping a 4x margin is used, except
# for inpainting whose PSNR already falls from 0.3 on.
ZETA = {"inpaint": 0.3, "sr": 0.5, "gdeblur": 0.5, "mdeblur": 0.5}

SOLVER_PREFIX = {"ldps": "ldps", "psld": "psld", "resample": "resample", "latent_daps": "daps"}
PSLD_GAMMA = 0.1

_BASE = {
    "schedule": {"T": 1000, "beta_min": 1.0e-4, "beta_max": 0.02},
    "prior": {"kind": "circle", "d": 8, "n_components": 3, "radius": 4.0, "variance": 0.5},
    "run": {"n_runs": 10, "base_seed": 0},
}


def _task_section(task):
    op = dict(TASKS[task])
    if op["kind"] == "circular_blur" and "kernel" not in op:
        from .measurement import gaussian_taps

        op = {"kind": "circular_blur", "kernel": [round(float(v), 12) for v in gaussian_taps(op["width"], op["std"])]}
    return {"operator": op, "decoder": {"kind": "identity"}, "noise_sigma": 0.03, "truth_seed": 1234}


def preset_dict(solver, task):
    """Raw config mapping for one (solver, task) pair."""
    row = REFERENCE_TABLES[solver][task]
    raw = copy.deepcopy(_BASE)
    raw["task"] = _task_section(task)
    raw["corrector"] = {"cadence_k": row["k"], "n_c": row["n_c"], "lambda": row["lambda"],
                        "mode": "measurement_consistent"}
    solver_sec = {"solver_kind": solver, "zeta": ZETA[task]}
    if solver == "psld":
        solver_sec["gamma_gluing"] = PSLD_GAMMA
    if solver == "resample":
        solver_sec["dps_corrector"] = {"cadence_k": 1, "n_c": row["n_c_dps"], "lambda": row["lambda_dps"],
                                       "mode": "measurement_consistent"}
    if solver == "latent_daps":
        solver_sec["daps"] = {"n_anneal": 50, "ode_steps": 2,
                              "int_corrector": {"cadence_k": 1, "n_c": row["n_c_int"], "lambda": row["lambda_int"],
                                                "mode": "measurement_consistent"}}
    raw["solver"] = solver_sec
    return raw


def _extra_presets():
    unconditional = copy.deepcopy(_BASE)
    unconditional["prior"]["d"] = 2
    unconditional["task"] = {"operator": {"kind": "mask", "keep": [0]}, "decoder": {"kind": "identity"},
                             "noise_sigma": 0.03, "truth_seed": 1234}
    unconditional["solver"] = {"solver_kind": "ldps", "zeta": 0.0, "record_stride": 15}
    unconditional["corrector"] = {"cadence_k": 15, "n_c": 0, "lambda": 0.15}
    unconditional["diagnostics"] = {"kl_stride": 15, "gmm_components": 8, "n_trajectories": 1000}
    # paired-trajectory KL study on the super-resolution task
    kl_sr = preset_dict("ldps", "sr")
    kl_sr["solver"]["record_stride"] = 15
    kl_sr["diagnostics"] = {"kl_stride": 15, "gmm_components": 8, "mc_samples": 100000,
                            "reference_mode": "exact_marginal", "n_trajectories": 1000}
    # residual drift of MCLC versus plain Langevin correction
    drift_sr = preset_dict("ldps", "sr")
    drift_sr["run"]["n_runs"] = 100
    return {"unconditional": unconditional, "kl_sr": kl_sr, "drift_sr": drift_sr}


def _all_presets():
    out = {}
    for solver, prefix in SOLVER_PREFIX.items():
        for task in TASKS:
            out[f"{prefix}_{task}"] = preset_dict(solver, task)
    out.update(_extra_presets())
    return out


def write_presets(directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, raw in _all_presets().items():
        parse_config(raw)
        text = f"# preset {name}\n" + yaml.safe_dump(raw, sort_keys=False)
        (directory / f"{name}.yaml").write_text(text)


def _preset_dir():
    return resources.files("mclc_lab") / "presets"


def preset_names():
    return sorted(p.name[:-5] for p in _preset_dir().iterdir() if p.name.endswith(".yaml"))


def preset_path(name):
    p = _preset_dir() / f"{name}.yaml"
    if not p.is_file():
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return Path(str(p))


def load_preset(name, overrides=None):
    return load_config(preset_path(name), overrides)
