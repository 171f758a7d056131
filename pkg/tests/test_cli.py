import subprocess
import sys

import numpy as np
import pytest

from ppboot.cli import main, read_sample, sample_csv
from ppboot.errors import IngestionError
from ppboot.popmodel import read_population


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def popfile(tmp_path, capsys):
    p = tmp_path / "pop.csv"
    assert run(["generate", "--N", 60, "--seed", 7, "--out", p], capsys)[0] == 0
    return p


def test_generate_rows_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        code, _, _ = run(["generate", "--model", "linear-gaussian", "--corr", 0.8, "--N", 400, "--seed", 7, "--out", p], capsys)
        assert code == 0
    assert a.read_bytes() == b.read_bytes()
    assert read_population(a).N == 400


def test_generate_missing_N(capsys):
    code, _, err = run(["generate", "--seed", 1], capsys)
    assert code == 2 and "--N" in err


def test_unknown_subcommand(capsys):
    assert run(["frobnicate"], capsys)[0] == 2


def test_help_exits_zero(capsys):
    assert run(["--help"], capsys)[0] == 0


def test_sample_roundtrip(popfile, tmp_path, capsys):
    s = tmp_path / "s.csv"
    assert run(["sample", "--population", popfile, "--n", 12, "--seed", 3, "--out", s], capsys)[0] == 0
    ids, y, x, pi = read_sample(s)
    pop = read_population(popfile)
    assert ids.size == 12 and np.array_equal(y, pop.y[ids]) and np.array_equal(x, pop.x[ids])
    assert np.all((pi > 0) & (pi < 1))


def test_read_sample_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("id,y,x\n1,2,3\n")
    with pytest.raises(IngestionError):
        read_sample(p)
    p.write_text(sample_csv(np.array([0]), np.array([1.0]), np.array([2.0]), np.array([1.5])))
    with pytest.raises(IngestionError):
        read_sample(p)


def test_missing_file_is_io_error(tmp_path, capsys):
    code, _, err = run(["sample", "--population", tmp_path / "nope.csv", "--n", 3], capsys)
    assert code == 3 and "error" in err


def test_bootstrap_report_and_replay(popfile, capsys):
    argv = ["bootstrap", "--population", popfile, "--n", 12, "--builder", "cpp", "--M", 200, "--seed", 5,
            "--functional", "mean", "--functional", "q0.5"]
    code, a, _ = run(argv, capsys)
    assert code == 0
    assert run(argv, capsys)[1] == a
    rows = [l.split(",") for l in a.splitlines()[2:]]
    assert [(r[0], r[3]) for r in rows] == [("mean", "percentile"), ("mean", "normal"), ("q0.5", "percentile"), ("q0.5", "normal")]
    for r in rows:
        assert float(r[4]) <= float(r[1]) <= float(r[5]) or r[3] == "percentile"


def test_bootstrap_census_zero_width(popfile, capsys):
    code, out, _ = run(["bootstrap", "--population", popfile, "--n", 60, "--builder", "hd", "--M", 20], capsys)
    assert code == 0
    for r in out.splitlines()[2:]:
        f = r.split(",")
        assert f[4] == f[5] == f[1]


def test_hd_without_population_is_capability_error(popfile, tmp_path, capsys):
    s = tmp_path / "s.csv"
    run(["sample", "--population", popfile, "--n", 12, "--out", s], capsys)
    code, _, err = run(["bootstrap", "--sample", s, "--N", 60, "--builder", "hd", "--M", 20], capsys)
    assert code == 5 and "hd" in err


def test_infeasible_dcal_numeric_exit(tmp_path, capsys):
    s = tmp_path / "s.csv"
    s.write_text(sample_csv(np.arange(3), np.ones(3), np.array([1.0, 1.5, 2.0]), np.full(3, 0.3)))
    code, _, err = run(["bootstrap", "--sample", s, "--N", 10, "--xbar", 5.0, "--builder", "dcal", "--M", 10], capsys)
    assert code == 4 and "error" in err


def test_pseudopop_export(popfile, capsys):
    code, out, _ = run(["pseudopop", "--population", popfile, "--n", 12, "--builder", "mul", "--seed", 2], capsys)
    assert code == 0
    assert out.splitlines()[0] == "donor,y,x" and len(out.splitlines()) == 61


def test_simulate_config(tmp_path, capsys):
    cfg = tmp_path / "s.cfg"
    cfg.write_text("N = 40\nmc_runs = 3\nM = 20\nbuilders = ht, hd, dir\nfunctionals = mean\nseed = 4\n")
    argv = ["simulate", "--config", cfg, "--format", "csv", "--threads", 1]
    code, a, err = run(argv, capsys)
    assert code == 0 and "warning" in err
    assert run(argv, capsys)[1] == a
    assert a.splitlines()[0] == "table,design,N,builder,functional,metric,value,se,note"
    code, b, _ = run(argv + ["--mc-runs", 1], capsys)
    assert code == 0 and ",n/a," in b


def test_simulate_schema_errors(tmp_path, capsys):
    cfg = tmp_path / "s.cfg"
    cfg.write_text("N = 40\nspeed = 3\n")
    code, _, err = run(["simulate", "--config", cfg], capsys)
    assert code == 2 and "s.cfg:2" in err and "speed" in err
    cfg.write_text("N = 40\nn = 40\n")
    assert run(["simulate", "--config", cfg], capsys)[0] == 2


def test_kernel_check_command(capsys):
    code, out, _ = run(["kernel-check", "--grid", 4], capsys)
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("# independence reduction") and float(lines[0].split("=")[-1]) < 1e-10


def test_design_audit(tmp_path, capsys):
    d = tmp_path / "d.csv"
    code, out, _ = run(["design-audit", "--pi", "0.2,0.4,0.6,0.8", "--distribution-out", d], capsys)
    assert code == 0
    assert "# design=cps N=4 n=2" in out
    diff = float([l for l in out.splitlines() if l.startswith("# max |pi_i")][0].split("=")[-1])
    assert diff < 1e-6
    assert d.read_text().splitlines()[0] == "subset,probability"
    assert run(["design-audit", "--pi", "0.2,0.4"], capsys)[0] == 2


def test_console_module_entry(popfile):
    out = subprocess.run([sys.executable, "-m", "ppboot.cli", "sample", "--population", str(popfile), "--n", "5", "--seed", "1"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("id,y,x,pi")
