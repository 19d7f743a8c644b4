import csv
import io
import json

import pytest

from stochstokes.cli import EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, main

CONFIG = """
[model]
nu = 0.02
T = 0.5

[noise]
sigma0 = 0.5
sigma1 = 0.5

[discretization]
M_list = 4 8 16
M_ref = 64
N_modes = 8

[experiment]
samples = 4
q_list = 2
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "study.ini"
    path.write_text(CONFIG)
    return path


def test_mesh_info(capsys):
    assert main(["mesh-info", "--L", "2", "--n", "4"]) == EXIT_OK
    info = json.loads(capsys.readouterr().out)
    n = 4
    assert (info["vertices"], info["edges"], info["triangles"]) == (n * n, 3 * n * n, 2 * n * n)
    assert (info["p1_dofs"], info["p2_scalar_dofs"], info["velocity_dofs"]) == (n * n, 4 * n * n, 8 * n * n)
    assert info["h"] == pytest.approx(2 * 2**0.5 / n) and info["L"] == 2.0


def test_mesh_info_rejects_bad_size(capsys):
    assert main(["mesh-info", "--n", "1"]) == EXIT_CONFIG


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["run"])
    assert exc.value.code == 2


def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nviscosity = 1\n")
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG
    assert "viscosity" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "absent.ini")]) == EXIT_CONFIG


def test_bad_seed_exits_2(config):
    assert main(["run", "--config", str(config), "--seed", "-1"]) == EXIT_CONFIG


def test_run_to_stdout(config, capsys):
    assert main(["run", "--config", str(config)]) == EXIT_OK
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert rows[0][0] == "scheme" and len(rows) == 4


def test_out_dir_and_json(config, tmp_path):
    out = tmp_path / "res"
    assert main(["run", "--config", str(config), "--out", str(out), "--format", "json", "--samples", "3"]) == EXIT_OK
    data = json.loads((out / "run.json").read_text())
    assert data["samples"] == 3 and len(data["rows"]) == 3


def test_seed_override_changes_output(config, capsys):
    main(["run", "--config", str(config), "--seed", "1"])
    a = capsys.readouterr().out
    main(["run", "--config", str(config), "--seed", "1"])
    b = capsys.readouterr().out
    main(["run", "--config", str(config), "--seed", "2"])
    assert a == b != capsys.readouterr().out


def test_study_reports_bands(config, capsys):
    code = main(["converge-time", "--config", str(config)])
    err = capsys.readouterr().err
    lines = [l for l in err.splitlines() if l.startswith(("PASS", "FAIL"))]
    assert lines and code in (EXIT_OK, EXIT_FAILURE)
    assert (code == EXIT_FAILURE) == any(l.startswith("FAIL") for l in lines)


def test_space_study_needs_meshes(config):
    assert main(["converge-space", "--config", str(config)]) == EXIT_CONFIG
