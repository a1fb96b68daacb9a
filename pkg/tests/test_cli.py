import csv
import subprocess
import sys

import pytest

from anisoflow.cli import EXIT_INADMISSIBLE, EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, StudyError, StudySpec, main
from anisoflow.sim import SimConfig

SMALL = SimConfig(h=0.02, dt=1e-3, t_end=3e-3)


@pytest.fixture
def config_file(tmp_path):
    return SMALL.replace(output_dir=str(tmp_path / "from_config")).save(tmp_path / "run.toml")


def test_run_writes_record(tmp_path, config_file, capsys):
    out = tmp_path / "out"
    assert main(["run", str(config_file), "-o", str(out)]) == EXIT_OK
    assert (out / "record.csv").exists()
    assert SimConfig.load(out / "config.toml") == SMALL.replace(output_dir=str(tmp_path / "from_config"))
    line = capsys.readouterr().out
    assert "final b=" in line and "wall time=" in line and "L2 error=" in line


def test_run_uses_config_directory_and_env(tmp_path, config_file, monkeypatch):
    assert main(["run", "--config", str(config_file)]) == EXIT_OK
    assert (tmp_path / "from_config" / "record.csv").exists()
    monkeypatch.setenv("ANISOFLOW_OUT", str(tmp_path / "env"))
    assert main(["run", str(config_file)]) == EXIT_OK
    assert (tmp_path / "env" / "record.csv").exists()


def test_run_snapshots(tmp_path, config_file):
    out = tmp_path / "out"
    assert main(["run", str(config_file), "-o", str(out), "--snapshot-every", "1"]) == EXIT_OK
    assert len(list((out / "snapshots").glob("*.vtk"))) == 4


def test_invalid_mesh_size_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text(SMALL.dumps().replace("h = 0.02", "h = 0.0"))
    assert main(["run", str(path), "-o", str(tmp_path / "o")]) == EXIT_VALIDATION
    assert "h must be positive" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path):
    assert main(["run", str(tmp_path / "absent.toml")]) == EXIT_VALIDATION
    assert main(["run"]) == EXIT_VALIDATION


def test_inadmissible_model_exits_3(tmp_path, capsys):
    cfg = SMALL.replace(case="circle", R=0.3, model="fourfold", variant="aniso")
    path = cfg.save(tmp_path / "four.toml")
    assert main(["run", str(path), "-o", str(tmp_path / "o")]) == EXIT_INADMISSIBLE
    err = capsys.readouterr().err
    assert "inadmissible" in err and "Dxy" in err


def test_force_flag_runs_inadmissible_model(tmp_path):
    cfg = SMALL.replace(case="circle", R=0.3, model="fourfold", variant="aniso", t_end=1e-3)
    path = cfg.save(tmp_path / "four.toml")
    code = main(["run", str(path), "-o", str(tmp_path / "o"), "--force-inadmissible"])
    # the ill-posed flow may or may not survive a step, but it is attempted
    assert code in (EXIT_OK, EXIT_RUNTIME)
    assert code == EXIT_RUNTIME or (tmp_path / "o" / "record.csv").exists()


def test_runtime_failure_exits_1(tmp_path, capsys):
    path = SMALL.replace(solver_rel_tol=1e-15, solver_max_iter=1).save(tmp_path / "tight.toml")
    assert main(["run", str(path), "-o", str(tmp_path / "o")]) == EXIT_RUNTIME
    assert "step 1" in capsys.readouterr().err


@pytest.mark.parametrize(
    "args, code, text",
    [
        (["sixfold377"], EXIT_OK, "admissible"),
        (["constant", "1"], EXIT_OK, "eigenvalue range [1, 1]"),
        (["constant(1)"], EXIT_OK, "admissible"),
        (["fourfold"], EXIT_INADMISSIBLE, "min eigenvalue -13 at lambda=0"),
        (["ellipse", "2", "0.2"], EXIT_OK, "admissible"),
    ],
)
def test_check_model(args, code, text, capsys):
    assert main(["check-model", *args]) == code
    assert text in capsys.readouterr().out


def test_check_model_unknown_exits_2():
    assert main(["check-model", "nosuch"]) == EXIT_VALIDATION


def _study_file(tmp_path, axis, values, base=SMALL):
    text = base.dumps() + f'\n[study]\naxis = "{axis}"\nvalues = {list(values)}\noutputs = "{tmp_path / "study"}"\n'
    path = tmp_path / "study.toml"
    path.write_text(text)
    return path


def test_study_mesh_size(tmp_path, capsys):
    path = _study_file(tmp_path, "meshSize", [0.024, 0.02, 0.016])
    assert main(["study", str(path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "fitted slope" in out
    with (tmp_path / "study" / "study.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["status"] for r in rows] == ["ok"] * 3
    assert all(float(r["error"]) > 0 for r in rows)
    fit = (tmp_path / "study" / "convergence.csv").read_text().splitlines()
    assert fit[0] == "h,error,slope" and len(fit) == 4


def test_study_ratio_with_jobs(tmp_path, capsys):
    path = _study_file(tmp_path, "ratio", [2.0, 4.0])
    assert main(["study", str(path), "--jobs", "2"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "r=2 error=" in out and "ratio study" in out


def test_study_failure_flushes_partial_table(tmp_path):
    # an impossible solver budget makes the first member fail
    base = SMALL.replace(solver_rel_tol=1e-15, solver_max_iter=1)
    path = _study_file(tmp_path, "meshSize", [0.024, 0.02, 0.016], base)
    assert main(["study", str(path)]) == EXIT_RUNTIME
    with (tmp_path / "study" / "study.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["status"] for r in rows] == ["not run"] * 3


def test_study_spec_validation(tmp_path):
    with pytest.raises(StudyError):
        StudySpec("meshSize", (1e-2, 5e-3), SMALL).validate()
    with pytest.raises(StudyError):
        StudySpec("meshSize", (1e-2, 5e-3, 6e-3), SMALL).validate()
    with pytest.raises(StudyError):
        StudySpec("timeStep", (1e-3, -5e-4, 2e-4), SMALL).validate()
    with pytest.raises(StudyError):
        StudySpec("colour", (1.0, 2.0, 3.0), SMALL).validate()
    StudySpec("ratio", (2.0, 8 / 3, 4.0, 5.0, 8.0), SMALL).validate()
    assert main(["study", str(_study_file(tmp_path, "meshSize", [0.02, 0.01]))]) == EXIT_VALIDATION


def test_compare(tmp_path, capsys):
    cfg = SMALL.replace(case="circle", R=0.3, model="sixfold377", variant=None)
    path = cfg.save(tmp_path / "cmp.toml")
    assert main(["compare", str(path), "-o", str(tmp_path / "cmp")]) == EXIT_OK
    assert "Lambda_aniso >= Lambda_iso" in capsys.readouterr().out
    for name in ("iso.csv", "aniso.csv", "lambda.csv", "contour_iso.csv", "contour_aniso.csv"):
        assert (tmp_path / "cmp" / name).exists()


def test_export_vtk(tmp_path):
    path = SMALL.save(tmp_path / "cfg.toml")
    target = tmp_path / "init.vtk"
    assert main(["export-vtk", str(path), "--vtk", str(target)]) == EXIT_OK
    text = target.read_text()
    assert "POINT_DATA" in text and "phi" in text and "divD" in text


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "anisoflow.cli", "check-model", "fourfold"], capture_output=True, text=True
    )
    assert proc.returncode == EXIT_INADMISSIBLE
