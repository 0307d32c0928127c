import csv
import json
import shutil
import subprocess
import xml.etree.ElementTree as ET

import pytest
import yaml

from mclc_lab.cli import EXIT_FAILED, EXIT_OK, EXIT_USAGE, main

SMALL = {
    "schedule": {"T": 60, "beta_min": 5e-4, "beta_max": 0.3},
    "prior": {"kind": "circle", "d": 4},
    "task": {"operator": {"kind": "average_downsample", "factor": 2}, "noise_sigma": 0.05},
    "solver": {"solver_kind": "ldps", "zeta": 0.3, "record_stride": 5},
    "corrector": {"cadence_k": 5, "n_c": 2, "lambda": 0.1},
    "run": {"n_runs": 3, "base_seed": 0},
    "diagnostics": {"kl_stride": 10, "gmm_components": 2, "mc_samples": 2000, "n_trajectories": 60},
}


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    return path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_run_writes_paired_artifacts(cfg_path, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg_path), "-o", str(out)]) == EXIT_OK
    man = json.loads((out / "manifest.json").read_text())
    assert man["schema"] == "mclc-lab/run-manifest" and man["version"] == 1
    assert man["seeds"] == [0, 1, 2] and man["status"] == "ok"
    for rel, digest in man["artifacts"].items():
        assert (out / rel).is_file() and len(digest) == 64
    for arm in ("base", "corrected"):
        assert (out / "run_000" / f"trajectory_{arm}.csv").is_file()
        assert len(_rows(out / f"metrics_{arm}.csv")) == 3
    assert "3 run(s)" in capsys.readouterr().out


def test_override_disables_the_corrected_arm(cfg_path, tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg_path), "-O", "corrector.n_c=0", "-o", str(out)]) == EXIT_OK
    assert (out / "metrics_base.json").is_file()
    assert not (out / "metrics_corrected.json").exists()
    assert not (out / "run_000" / "trajectory_corrected.csv").exists()


def test_rerun_gives_identical_hashes(cfg_path, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["run", "--config", str(cfg_path), "-o", str(out), "--dump-latents"]) == EXIT_OK
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    assert ma["artifacts"] == mb["artifacts"]
    assert ma["config_hash"] == mb["config_hash"]


def test_parallel_jobs_match_serial(cfg_path, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--config", str(cfg_path), "-o", str(a)]) == EXIT_OK
    assert main(["run", "--config", str(cfg_path), "-o", str(b), "--jobs", "2"]) == EXIT_OK
    ma = json.loads((a / "manifest.json").read_text())
    mb = json.loads((b / "manifest.json").read_text())
    assert ma["artifacts"] == mb["artifacts"]


def test_output_root_env(cfg_path, tmp_path, monkeypatch):
    monkeypatch.setenv("MCLC_LAB_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["run", "--config", str(cfg_path), "-O", "run.n_runs=1"]) == EXIT_OK
    (run_dir,) = (tmp_path / "root").iterdir()
    assert run_dir.name.startswith("run-small-")


def test_config_errors_exit_with_usage(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"corrector": {"n_c": 2, "lambda": -1}, "schedule": {"T": 1}}))
    assert main(["run", "--config", str(bad), "-o", str(tmp_path / "x")]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "configuration error" in err and "lambda" in err and "T must be" in err
    assert main(["run", "--config", str(tmp_path / "missing.yaml")]) == EXIT_USAGE
    assert main(["run", "--preset", "no_such_preset"]) == EXIT_USAGE
    with pytest.raises(SystemExit):
        main(["run"])


def test_failed_runs_exit_nonzero(cfg_path, tmp_path):
    out = tmp_path / "out"
    code = main(["run", "--config", str(cfg_path), "-O", "solver.zeta=50", "-O", "run.n_runs=1", "-o", str(out)])
    assert code == EXIT_FAILED
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "failed" and man["errors"]


def test_kl_diag(cfg_path, tmp_path):
    out = tmp_path / "kl"
    assert main(["kl-diag", "--config", str(cfg_path), "-o", str(out), "--reproducible"]) == EXIT_OK
    rep = json.loads((out / "kl_report.json").read_text())
    assert rep["schema"] == "mclc-lab/kl-report"
    assert all(t % 10 == 0 for t in [r + 1 for r in rep["timesteps"]])
    root = ET.parse(out / "kl_report.svg").getroot()
    assert len(root.findall("{http://www.w3.org/2000/svg}polyline")) == 2
    assert main(["plot", str(out / "kl_report.csv"), "--reproducible"]) == EXIT_OK
    assert (out / "kl_report.svg").is_file()


def test_kl_diag_stride_option(cfg_path, tmp_path):
    out = tmp_path / "kl"
    assert main(["kl-diag", "--config", str(cfg_path), "-o", str(out), "--stride", "15"]) == EXIT_OK
    rep = json.loads((out / "kl_report.json").read_text())
    assert [t + 1 for t in rep["timesteps"]] == [60, 45, 30, 15]


def test_kl_diag_default_stride_is_15():
    from mclc_lab.config import DiagnosticSpec

    assert DiagnosticSpec().kl_stride == 15


def test_kl_diag_without_corrector(cfg_path, tmp_path):
    out = tmp_path / "kl"
    assert main(["kl-diag", "--config", str(cfg_path), "-O", "corrector.n_c=0", "-o", str(out)]) == EXIT_OK
    rep = json.loads((out / "kl_report.json").read_text())
    # same ensemble and fit seed; only the Monte-Carlo draws differ
    for b, sb, c, sc in zip(rep["kl_base"], rep["se_base"], rep["kl_corrected"], rep["se_corrected"]):
        assert abs(b - c) <= 4 * (sb**2 + sc**2) ** 0.5


def test_sweep_row_count(cfg_path, tmp_path):
    out = tmp_path / "sw"
    args = ["sweep", "--config", str(cfg_path), "-o", str(out), "-O", "run.n_runs=2",
            "-g", "solver.zeta=*0.1,*0.5,*1,*2,*4", "-g", "corrector.n_c=0,1"]
    assert main(args) == EXIT_OK
    rows = _rows(out / "sweep.csv")
    assert len(rows) == 10 * 2
    assert sorted({round(float(r["solver.zeta"]), 12) for r in rows}) == [0.03, 0.15, 0.3, 0.6, 1.2]
    for r in rows:
        assert (r["psnr_corrected"] == "") == (r["corrector.n_c"] == "0")
    assert main(["plot", str(out / "sweep.csv"), "--reproducible"]) == EXIT_OK


def test_empty_grid_runs_the_config_point(cfg_path, tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep", "--config", str(cfg_path), "-o", str(out)]) == EXIT_OK
    rows = _rows(out / "sweep.csv")
    assert {r["point"] for r in rows} == {"0"}
    assert len(rows) == SMALL["run"]["n_runs"]


def test_sweep_validates_every_point_first(cfg_path, tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep", "--config", str(cfg_path), "-o", str(out), "-g", "corrector.lambda=0.1,-1"]) == EXIT_USAGE
    assert not (out / "point_000").exists()


def test_jacobian_probe(tmp_path, capsys):
    out = tmp_path / "jp"
    args = ["jacobian-probe", "--latent-grid", "4x4", "--region", "0,2,0,2", "--scales", "2,10",
            "--oracle", "-o", str(out), "--reproducible"]
    assert main(args) == EXIT_OK
    rows = _rows(out / "jacobian_probe.csv")
    assert [float(r["scale"]) for r in rows] == [1.0, 2.0, 10.0]
    for r in rows:
        assert float(r["relative_error"]) <= 1e-6
    assert (out / "jacobian_probe.svg").is_file()


def test_jacobian_probe_grid_follows_config(tmp_path, capsys):
    out = tmp_path / "jp"
    args = ["jacobian-probe", "--preset", "ldps_sr", "-O", "task.decoder.kind=smooth_map", "--scales", "3",
            "-o", str(out)]
    assert main(args) == EXIT_OK
    assert main(args + ["--latent-grid", "3x3"]) == EXIT_USAGE
    assert "does not match" in capsys.readouterr().err


def test_jacobian_probe_refuses_identity_decoder(tmp_path, capsys):
    assert main(["jacobian-probe", "--decoder", "identity", "-o", str(tmp_path)]) == EXIT_USAGE
    assert "identity decoder" in capsys.readouterr().err
    assert main(["jacobian-probe", "--preset", "ldps_sr", "--latent-grid", "2x4", "-o", str(tmp_path)]) == EXIT_USAGE


def test_plot_trajectory_and_metrics(cfg_path, tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg_path), "-o", str(out)]) == EXIT_OK
    assert main(["plot", str(out / "run_000" / "trajectory_corrected.csv"), "-o", str(tmp_path / "t.svg")]) == EXIT_OK
    assert main(["plot", str(out / "metrics_base.csv"), "-o", str(tmp_path / "m.svg")]) == EXIT_OK
    ET.parse(tmp_path / "t.svg")
    ET.parse(tmp_path / "m.svg")
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n")
    assert main(["plot", str(bad)]) == EXIT_USAGE


def test_verify_single_criterion_and_json(tmp_path, capsys):
    verdict = tmp_path / "v.json"
    code = main(["verify", "--only", "moment", "--json", str(verdict)])
    out = capsys.readouterr().out
    assert code == EXIT_OK
    assert out.splitlines()[0].startswith("[PASS] moment")
    data = json.loads(verdict.read_text())
    assert data["schema"] == "mclc-lab/verdict" and data["passed"] is True
    assert [r["key"] for r in data["results"]] == ["moment"]


def test_verify_reports_failures(capsys):
    assert main(["verify", "--only", "lambda"]) == EXIT_FAILED
    assert capsys.readouterr().out.startswith("[FAIL] lambda")
    assert main(["verify", "--only", "nope"]) == EXIT_USAGE


def test_verify_listing(capsys):
    assert main(["verify", "--list"]) == EXIT_OK
    assert len(capsys.readouterr().out.splitlines()) == 12
    assert main(["verify", "--list-presets"]) == EXIT_OK
    assert "ldps_inpaint" in capsys.readouterr().out


def test_console_script():
    exe = shutil.which("mclc-lab")
    if exe is None:
        pytest.skip("console script not installed")
    out = subprocess.run([exe, "--version"], capture_output=True, text=True, check=True)
    assert out.stdout.strip().startswith("mclc-lab")
