import csv
import json
import subprocess
import sys
from importlib import resources

import jsonschema
import numpy as np
import pytest

from mmfg import cli

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib


def write_config(path, text):
    path.write_text(text)
    return path


def run(args, capsys=None):
    code = cli.main([str(a) for a in args])
    err = capsys.readouterr().err if capsys is not None else ""
    return code, err


def schema():
    return json.loads(resources.files("mmfg").joinpath("summary.schema.json").read_text())


def test_print_defaults_roundtrip(capsys):
    assert cli.main(["--print-defaults"]) == 0
    text = capsys.readouterr().out
    parsed = tomllib.loads(text)
    assert cli.merge_config(parsed) == cli.merge_config({})


def test_negative_particles_is_a_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.toml", "command = 'solve-mfg'\n[solver]\nparticles = -5\n")
    code, err = run(["--config", cfg], capsys)
    assert code == 1
    payload = json.loads(err.strip().splitlines()[-1])
    assert payload["exit_code"] == 1 and "particles" in payload["error"]["message"]
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["status"] == "failed"
    jsonschema.validate(summary, schema())


def test_unknown_keys_are_listed(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.toml", "[solver]\nparticle = 5\nbogus = 1\n")
    code, err = run(["--config", cfg], capsys)
    assert code == 1
    msg = json.loads(err.strip().splitlines()[-1])["error"]["message"]
    assert "particle" in msg and "bogus" in msg


def test_bad_command_line_is_a_config_error(capsys):
    code, err = run(["no-such-command"], capsys)
    assert code == 1 and json.loads(err)["exit_code"] == 1


def test_verify_example1(tmp_path):
    cfg = write_config(tmp_path / "v.toml", "command = 'verify-example'\n[model]\nname = 'example1'\n"
                                            "[solver]\nparticles = 1000\nsteps = 100\nt_min = 0.0\n")
    assert cli.main(["--config", str(cfg)]) == 0
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    jsonschema.validate(summary, schema())
    assert summary["checks"]["alpha0_max_abs_err"] <= 1e-8
    assert summary["checks"]["necessary_conditions"]["passed"]
    with open(tmp_path / "out" / "trajectories.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == cli.COLUMNS and len(rows) == 102


def test_solve_then_nash_gap_pipeline(tmp_path):
    write_config(tmp_path / "s.toml", "command = 'solve-mfg'\n[model]\nname = 'example2'\n"
                                      "[solver]\nparticles = 400\nsteps = 50\n")
    assert cli.main(["--config", str(tmp_path / "s.toml")]) == 0
    out = tmp_path / "out"
    assert (out / "bundle.json").exists() and (out / "trajectories.csv").exists()
    write_config(tmp_path / "n.toml", "command = 'nash-gap'\n[model]\nname = 'example2'\n"
                                      "[solver]\nparticles = 400\nsteps = 50\n"
                                      "[game]\nN = 20\nmc_runs = 20\nsampled_players = 2\nbr_particles = 300\n"
                                      "bundle = 'out/bundle.json'\n[output]\ndir = 'gap'\n")
    assert cli.main(["--config", str(tmp_path / "n.toml")]) == 0
    gap = tmp_path / "gap"
    summary = json.loads((gap / "summary.json").read_text())
    jsonschema.validate(summary, schema())
    assert all(np.isfinite(v) for v in summary["eps"].values())
    report = json.loads((gap / "nash_gap.json").read_text())
    assert report["N"] == 20
    with open(gap / "per_run.csv") as fh:
        assert sum(1 for _ in fh) == 1 + 20 * 21


def test_mean_field_ode_command(tmp_path):
    cfg = write_config(tmp_path / "o.toml", "command = 'mean-field-ode'\n[model]\nname = 'example2'\n"
                                            "[solver]\nsteps = 100\n")
    assert cli.main(["--config", str(cfg)]) == 0
    header, rows = cli.read_trajectories(tmp_path / "out" / "trajectories.csv")
    rows = np.array(rows)
    t = rows[:, header.index("t")]
    g = rows[:, header.index("mean_gamma")]
    assert np.abs(g / np.cbrt(3 * t) - 1).max() <= 1e-6


def test_nonconvergence_exits_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.toml", "command = 'solve-mfg'\n[solver]\nparticles = 100\nsteps = 20\n"
                                            "max_iter = 1\ntol = 1e-12\n")
    code, err = run(["--config", cfg], capsys)
    assert code == 2
    payload = json.loads(err.strip().splitlines()[-1])
    assert payload["error"]["type"] == "NonConvergenceError" and len(payload["error"]["residuals"]) == 1


def test_output_path_that_is_a_file_exits_3(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _ = run(["mean-field-ode", "--output", blocker], capsys)
    assert code == 3


def test_seed_flag_overrides_config(tmp_path):
    cfg = write_config(tmp_path / "c.toml", "command = 'mean-field-ode'\n[solver]\nseed = 1\nsteps = 10\n")
    assert cli.main(["--config", str(cfg), "--seed", "9"]) == 0
    assert json.loads((tmp_path / "out" / "summary.json").read_text())["seed"] == 9


# ---- plot-data -----------------------------------------------------------------

def trajectories(path, t):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cli.COLUMNS)
        for s in t:
            w.writerow([s] + [0.5] * (len(cli.COLUMNS) - 1))
    return path


def test_plot_data_oracle_series(tmp_path):
    src = trajectories(tmp_path / "trajectories.csv", [0.1, 0.5, 1.0])
    assert cli.main(["plot-data", str(src), "--model", "example2"]) == 0
    with open(tmp_path / "plot_data.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "series", "value"]
    ser = len(cli.COLUMNS) - 1 + len(cli.ORACLE_SERIES)
    assert len(rows) - 1 == 3 * ser
    og = [r for r in rows[1:] if r[1] == "mean_gamma_oracle"]
    assert [float(r[2]) for r in og] == pytest.approx(np.cbrt(3 * np.array([0.1, 0.5, 1.0])), rel=1e-15)


def test_plot_data_without_oracle_counts_rows(tmp_path):
    src = trajectories(tmp_path / "trajectories.csv", np.linspace(0, 1, 7))
    dst = tmp_path / "long.csv"
    assert cli.main(["plot-data", str(src), "--model", "example3", "--output", str(dst)]) == 0
    with open(dst) as fh:
        assert sum(1 for _ in fh) - 1 == 7 * (len(cli.COLUMNS) - 1)


def test_plot_data_empty_input(tmp_path):
    src = trajectories(tmp_path / "trajectories.csv", [])
    assert cli.main(["plot-data", str(src)]) == 0
    assert (tmp_path / "plot_data.csv").read_text() == "t,series,value\n"


def test_plot_data_malformed_line(tmp_path, capsys):
    src = trajectories(tmp_path / "trajectories.csv", [0.1, 0.2])
    with open(src, "a") as fh:
        fh.write("0.3,1,2\n")
    code, err = run(["plot-data", src], capsys)
    assert code == 1 and "line 4" in json.loads(err)["error"]["message"]


def test_console_script_runs(tmp_path):
    res = subprocess.run([sys.executable, "-m", "mmfg", "mean-field-ode", "--output", str(tmp_path / "o")],
                         capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "o" / "trajectories.csv").exists()
