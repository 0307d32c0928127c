import textwrap

import numpy as np
import pytest
import yaml

from mclc_lab.config import (ConfigError, ExperimentConfig, apply_overrides, config_hash, default_output_root,
                             dump_config, load_config, parse_config)
from mclc_lab.presets import REFERENCE_TABLES, TASKS, load_preset, preset_dict, preset_names, preset_path, write_presets
from mclc_lab.prior import circle_prior, save_prior


def test_defaults_build():
    cfg = parse_config({})
    assert isinstance(cfg, ExperimentConfig)
    sched, prior, op, dec = cfg.build()
    assert sched.T == 1000 and prior.d == 8 and op.input_dim == 8


def test_round_trip_through_yaml(tmp_path):
    cfg = load_preset("resample_sr")
    path = tmp_path / "c.yaml"
    dump_config(cfg, path)
    again = load_config(path)
    assert again == cfg
    assert config_hash(again) == config_hash(cfg)


def test_overrides():
    cfg = parse_config({}, overrides=["corrector.n_c=0", "solver.zeta=0.25", "task.operator.kind=mask"])
    assert cfg.corrector.n_c == 0 and cfg.solver.zeta == 0.25
    raw = apply_overrides({"a": {"b": 1}}, ["a.c=[1, 2]"])
    assert raw == {"a": {"b": 1, "c": [1, 2]}}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])
    with pytest.raises(ConfigError):
        apply_overrides({"a": 1}, ["a.b=2"])


@pytest.mark.parametrize("raw,needle", [
    ({"schedule": {"T": 1}}, "T must be"),
    ({"corrector": {"n_c": 2, "lambda": 0}}, "lambda must be > 0"),
    ({"solver": {"solver_kind": "dps"}}, "solver_kind"),
    ({"solver": {"corrector": {"n_c": 1}}}, "top-level"),
    ({"prior": {"kind": "file", "path": "/nonexistent.txt"}}, "not found"),
    ({"run": {"n_runs": 0}}, "n_runs"),
    ({"bogus": 1}, "bogus"),
    ({"schedule": {"T": "many"}}, "schedule.T"),
    ({"task": {"operator": {"kind": "average_downsample", "factor": 3}}}, "factor"),
])
def test_config_errors_name_the_field(raw, needle):
    with pytest.raises(ConfigError) as info:
        parse_config(raw)
    assert any(needle in e for e in info.value.errors)


def test_collects_several_errors():
    with pytest.raises(ConfigError) as info:
        parse_config({"schedule": {"T": 1}, "run": {"jobs": 0}})
    assert len(info.value.errors) >= 2


def test_file_prior_relative_to_config(tmp_path):
    save_prior(circle_prior(3), tmp_path / "prior.txt")
    (tmp_path / "c.yaml").write_text(textwrap.dedent("""
        prior: {kind: file, path: prior.txt}
        task: {operator: {kind: identity}}
    """))
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.build()[1].d == 3


def test_inline_prior():
    cfg = parse_config({"prior": {"kind": "inline", "weights": [1.0], "means": [[0.0, 1.0]],
                                  "covariances": [[[1.0, 0.0], [0.0, 1.0]]]}})
    np.testing.assert_array_equal(cfg.build()[1].means, [[0.0, 1.0]])


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv("MCLC_LAB_OUTPUT_ROOT", str(tmp_path))
    assert default_output_root() == tmp_path
    monkeypatch.delenv("MCLC_LAB_OUTPUT_ROOT")
    assert str(default_output_root()) == "mclc_runs"


def test_shipped_presets_are_current(tmp_path):
    write_presets(tmp_path)
    for name in preset_names():
        assert (tmp_path / f"{name}.yaml").read_text() == preset_path(name).read_text(), name
    assert sorted(p.stem for p in tmp_path.iterdir()) == preset_names()


def test_presets_carry_the_table_values():
    cfg = load_preset("ldps_inpaint")
    assert (cfg.corrector.cadence_k, cfg.corrector.n_c, cfg.corrector.lam) == (15, 3, 0.07)
    cfg = load_preset("ldps_gdeblur")
    assert (cfg.corrector.cadence_k, cfg.corrector.n_c, cfg.corrector.lam) == (10, 3, 0.27)
    cfg = load_preset("psld_sr")
    assert (cfg.corrector.cadence_k, cfg.corrector.n_c, cfg.corrector.lam) == (15, 3, 0.15)
    cfg = load_preset("resample_inpaint")
    assert (cfg.corrector.cadence_k, cfg.corrector.n_c, cfg.corrector.lam) == (5, 3, 0.15)
    assert (cfg.solver.dps_corrector.n_c, cfg.solver.dps_corrector.lam) == (1, 0.05)
    cfg = load_preset("daps_sr")
    assert (cfg.corrector.cadence_k, cfg.corrector.n_c, cfg.corrector.lam) == (5, 3, 0.15)
    assert cfg.solver.daps.int_corrector.n_c == 0
    assert cfg.solver.daps.n_anneal == 50 and cfg.solver.daps.ode_steps == 2


@pytest.mark.parametrize("name", ["unconditional", "kl_sr", "drift_sr"] + [
    f"{p}_{t}" for p in ("ldps", "psld", "resample", "daps") for t in TASKS])
def test_every_preset_loads(name):
    cfg = load_preset(name)
    cfg.build()


def test_unknown_preset():
    with pytest.raises(KeyError):
        preset_path("nope")


def test_preset_dict_matches_tables():
    for solver, rows in REFERENCE_TABLES.items():
        for task in TASKS:
            raw = preset_dict(solver, task)
            assert raw["corrector"]["lambda"] == rows[task]["lambda"]
            yaml.safe_dump(raw)
