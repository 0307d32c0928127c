"""Experiment configuration: YAML files mapped onto frozen dataclasses.

Schema (every section optional; defaults shown in the dataclasses)::

    schedule:    {T, beta_min, beta_max}
    prior:       {kind: circle|inline|file, d, n_components, radius, variance,
                  weights, means, covariances, path}
    task:        {operator: {kind, ...}, decoder: {kind, ...}, noise_sigma, truth_seed}
    solver:      {solver_kind, zeta, gamma_gluing, guidance_jacobian, record_stride,
                  dps_corrector: {...}, resample: {...}, daps: {..., int_corrector: {...}}}
    corrector:   {cadence_k, n_c, lambda, mode, bound_target, recompute_g}
    run:         {n_runs, base_seed, output_dir, dump_latents, jobs}
    diagnostics: {kl_stride, gmm_components, mc_samples, reference_mode, n_trajectories}

Unknown keys and out-of-range values are collected and reported together.
See ``docs/config.md`` for field descriptions.
"""

from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Optional, Union, get_args, get_origin, get_type_hints
import copy
import hashlib
import json
import os

import numpy as np
import yaml

from .corrector import CorrectorConfig
from .diagnostics import REFERENCE_MODES
from .measurement import make_decoder, make_operator
from .prior import GmmPrior, circle_prior, load_prior
from .schedule import make_linear_schedule
from .solvers import SolverConfig

OUTPUT_ROOT_ENV = "MCLC_LAB_OUTPUT_ROOT"

__all__ = [
    "ConfigError",
    "ScheduleSpec",
    "PriorSpec",
    "TaskSpec",
    "RunSpec",
    "DiagnosticSpec",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "apply_overrides",
    "dump_config",
    "config_hash",
    "default_output_root",
]


class ConfigError(ValueError):
    """Raised with every violation found, one per line."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass(frozen=True)
class ScheduleSpec:
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02

    def validate(self):
        errors = []
        if self.T < 2:
            errors.append("T must be >= 2")
        if not 0.0 < self.beta_min <= self.beta_max < 1.0:
            errors.append("need 0 < beta_min <= beta_max < 1")
        return errors

    def build(self):
        return make_linear_schedule(self.T, self.beta_min, self.beta_max)


@dataclass(frozen=True)
class PriorSpec:
    kind: str = "circle"
    d: int = 8
    n_components: int = 3
    radius: float = 4.0
    variance: float = 0.5
    weights: Optional[list] = None
    means: Optional[list] = None
    covariances: Optional[list] = None
    path: Optional[str] = None

    def validate(self):
        errors = []
        if self.kind not in ("circle", "inline", "file"):
            errors.append("prior.kind must be circle, inline or file")
        if self.kind == "circle":
            if self.d < 2:
                errors.append("circle prior needs d >= 2")
            if self.n_components < 1 or self.radius < 0 or self.variance <= 0:
                errors.append("circle prior needs n_components >= 1, radius >= 0, variance > 0")
        if self.kind == "inline" and None in (self.weights, self.means, self.covariances):
            errors.append("inline prior needs weights, means and covariances")
        if self.kind == "file":
            if not self.path:
                errors.append("file prior needs a path")
            elif not Path(self.path).is_file():
                errors.append(f"prior file not found: {self.path}")
        return errors

    def build(self):
        if self.kind == "circle":
            return circle_prior(self.d, self.n_components, self.radius, self.variance)
        if self.kind == "inline":
            return GmmPrior(np.array(self.weights, float), np.array(self.means, float), np.array(self.covariances, float))
        return load_prior(self.path)


@dataclass(frozen=True)
class TaskSpec:
    operator: dict = field(default_factory=lambda: {"kind": "average_downsample", "factor": 2})
    decoder: dict = field(default_factory=lambda: {"kind": "identity"})
    noise_sigma: float = 0.03
    truth_seed: int = 1234

    def validate(self):
        return [] if self.noise_sigma >= 0 else ["task.noise_sigma must be >= 0"]

    def build(self, d):
        dec = make_decoder(self.decoder, d)
        op = make_operator(self.operator, dec.signal_dim)
        return op, dec


@dataclass(frozen=True)
class RunSpec:
    n_runs: int = 10
    base_seed: int = 0
    output_dir: Optional[str] = None
    dump_latents: bool = False
    jobs: int = 1

    def validate(self):
        errors = []
        if self.n_runs < 1:
            errors.append("run.n_runs must be >= 1")
        if self.jobs < 1:
            errors.append("run.jobs must be >= 1")
        if self.base_seed < 0:
            errors.append("run.base_seed must be >= 0")
        return errors


@dataclass(frozen=True)
class DiagnosticSpec:
    kl_stride: int = 15
    gmm_components: int = 8
    mc_samples: int = 100_000
    reference_mode: str = "exact_marginal"
    n_trajectories: int = 1000

    def validate(self):
        errors = []
        if self.kl_stride < 1:
            errors.append("diagnostics.kl_stride must be >= 1")
        if self.gmm_components < 1:
            errors.append("diagnostics.gmm_components must be >= 1")
        if self.mc_samples < 1:
            errors.append("diagnostics.mc_samples must be >= 1")
        if self.reference_mode not in REFERENCE_MODES:
            errors.append(f"diagnostics.reference_mode must be one of {REFERENCE_MODES}")
        if self.n_trajectories < self.gmm_components:
            errors.append("diagnostics.n_trajectories must be >= gmm_components")
        return errors


@dataclass(frozen=True)
class ExperimentConfig:
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    prior: PriorSpec = field(default_factory=PriorSpec)
    task: TaskSpec = field(default_factory=TaskSpec)
    solver: SolverConfig = field(default_factory=SolverConfig)
    corrector: CorrectorConfig = field(default_factory=CorrectorConfig)
    run: RunSpec = field(default_factory=RunSpec)
    diagnostics: DiagnosticSpec = field(default_factory=DiagnosticSpec)

    @property
    def solver_config(self):
        """Solver config with the top-level corrector attached."""
        return replace(self.solver, corrector=self.corrector)

    def to_dict(self):
        d = _to_plain(self)
        d["solver"].pop("corrector", None)
        return d

    def build(self):
        """Instantiate ``(schedule, prior, operator, decoder)``."""
        sched = self.schedule.build()
        prior = self.prior.build()
        op, dec = self.task.build(prior.d)
        return sched, prior, op, dec


# ---------------------------------------------------------------------------
# generic dataclass <-> mapping
# ---------------------------------------------------------------------------


def _key(f):
    return f.metadata.get("key", f.name)


def _to_plain(obj):
    if is_dataclass(obj):
        return {_key(f): _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _coerce(value, tp, where, errors):
    origin = get_origin(tp)
    if origin is Union:
        args = [a for a in get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], where, errors)
    if is_dataclass(tp):
        if not isinstance(value, dict):
            errors.append(f"{where}: expected a mapping")
            return None
        return _from_mapping(tp, value, where, errors)
    if tp is bool:
        if isinstance(value, bool):
            return value
        errors.append(f"{where}: expected true/false, got {value!r}")
        return None
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            errors.append(f"{where}: expected an integer, got {value!r}")
            return None
        return int(value)
    if tp is float:
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{where}: expected a number, got {value!r}")
            return None
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            errors.append(f"{where}: expected a string, got {value!r}")
            return None
        return value
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            errors.append(f"{where}: expected a mapping")
            return None
        return copy.deepcopy(value)
    if tp is list or origin is list:
        if not isinstance(value, list):
            errors.append(f"{where}: expected a list")
            return None
        return copy.deepcopy(value)
    return value


def _from_mapping(cls, data, where, errors):
    hints = get_type_hints(cls)
    by_key = {_key(f): f for f in fields(cls)}
    kwargs = {}
    for k, v in data.items():
        path = f"{where}.{k}" if where else str(k)
        f = by_key.get(k)
        if f is None:
            errors.append(f"{path}: unknown key")
            continue
        n_before = len(errors)
        val = _coerce(v, hints[f.name], path, errors)
        if len(errors) == n_before:
            kwargs[f.name] = val
    prefix = f"{where}: " if where else ""
    try:
        obj = cls(**kwargs)
    except ValueError as exc:
        msg = str(exc).split(": ", 1)[-1]
        errors.extend(prefix + m for m in msg.split("; "))
        return None
    problems = obj.validate() if hasattr(obj, "validate") else []
    errors.extend(prefix + m for m in problems)
    return None if problems or len(kwargs) < len(data) else obj


def _set_dotted(d, path, value):
    parts = path.split(".")
    cur = d
    for p in parts[:-1]:
        nxt = cur.get(p)
        if nxt is None:
            nxt = cur[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigError([f"override {path}: {p} is not a section"])
        cur = nxt
    cur[parts[-1]] = value


def apply_overrides(raw, overrides):
    """Apply ``section.key=value`` strings (values parsed as YAML scalars)."""
    raw = copy.deepcopy(raw)
    errors = []
    for item in overrides or ():
        if "=" not in item:
            errors.append(f"override {item!r}: expected path=value")
            continue
        path, text = item.split("=", 1)
        try:
            _set_dotted(raw, path.strip(), yaml.safe_load(text))
        except ConfigError as exc:
            errors += exc.errors
    if errors:
        raise ConfigError(errors)
    return raw


def parse_config(raw, base_dir=None, overrides=None):
    """Validate a mapping and build an :class:`ExperimentConfig`."""
    raw = apply_overrides(raw or {}, overrides)
    if not isinstance(raw, dict):
        raise ConfigError(["top level must be a mapping"])
    solver_raw = raw.get("solver")
    errors = []
    if isinstance(solver_raw, dict) and "corrector" in solver_raw:
        errors.append("solver.corrector: unknown key (the corrector section is top-level)")
        raw = dict(raw, solver={k: v for k, v in solver_raw.items() if k != "corrector"})
    prior_raw = raw.get("prior")
    if base_dir is not None and isinstance(prior_raw, dict) and prior_raw.get("path"):
        p = Path(prior_raw["path"])
        if not p.is_absolute():
            raw = dict(raw, prior=dict(prior_raw, path=str(Path(base_dir) / p)))
    cfg = _from_mapping(ExperimentConfig, raw, "", errors)
    if cfg is not None and not errors:
        try:
            sched, prior, op, dec = cfg.build()
        except (ValueError, KeyError, TypeError) as exc:
            errors.append(f"task/prior: {exc}")
    if errors:
        raise ConfigError(list(dict.fromkeys(errors)))
    return cfg


def load_config(path, overrides=None):
    path = Path(path)
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    return parse_config(raw, base_dir=path.parent, overrides=overrides)


def dump_config(cfg, path=None):
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=None)
    if path is not None:
        Path(path).write_text(text)
    return text


def config_hash(cfg):
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def default_output_root():
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "mclc_runs"))
