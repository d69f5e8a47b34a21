"""End-to-end CLI checks: CSV layout, byte-level determinism, exit codes."""

import shutil
import subprocess

import numpy as np
import pytest

import gamedyn as gd
from gamedyn import cli
from gamedyn.logit import fixed_point as real_fixed_point

from conftest import SCENARIO_DIR, get_scenario


def short_pigou(tmp_path, x0="vertex:r2", horizon="1"):
    """Pigou scenario with a shortened run block, written under tmp_path."""
    text = (SCENARIO_DIR / "pigou.scn").read_text()
    text = text.replace("x0 = vertex:r2", f"x0 = {x0}")
    text = text.replace("horizon = 50", f"horizon = {horizon}")
    p = tmp_path / "pigou_short.scn"
    p.write_text(text)
    return gd.load_scenario(p), p


# ---------------------------------------------------------------------------
# simulate


def test_simulate_trajectory_csv(tmp_path):
    scn = get_scenario("pigou")
    out = tmp_path / "nested" / "run"      # directories are created on demand
    assert cli.run("simulate", scn, out_dir=out, quiet=True) == 0
    path = out / "trajectory.csv"
    text = path.read_text()
    lines = text.splitlines()
    assert lines[0] == "t,x_r1_p1,x_r2_p1,w_r1,w_r2,y_e1,y_e2"
    assert len(lines) == 5002              # header + horizon/dt + 1 records
    assert "\r" not in text

    arr = np.loadtxt(path, delimiter=",", skiprows=1)
    t, x, w, y = arr[:, 0], arr[:, 1:3], arr[:, 3:5], arr[:, 5:7]
    assert t[0] == 0.0 and t[-1] == pytest.approx(50.0)
    np.testing.assert_allclose(x.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(w, x)    # single population
    np.testing.assert_array_equal(y, w)    # one link per route
    game, _ = scn.build_game()
    gd.validate_configuration(game, arr[-1, 1:3].reshape(2, 1))


def test_simulate_random_x0_seed_determinism(tmp_path):
    scn, _ = short_pigou(tmp_path, x0="random")
    for d, seed in (("a", 7), ("b", 7), ("c", 8)):
        cli.run("simulate", scn, out_dir=tmp_path / d, seed=seed, quiet=True)
    a = (tmp_path / "a" / "trajectory.csv").read_bytes()
    b = (tmp_path / "b" / "trajectory.csv").read_bytes()
    c = (tmp_path / "c" / "trajectory.csv").read_bytes()
    assert a == b
    assert a != c


# ---------------------------------------------------------------------------
# sweep / bifurcation


def test_sweep_csv_layout_and_thread_determinism(tmp_path):
    scn = get_scenario("constant")
    cli.run("sweep", scn, out_dir=tmp_path / "t1", quiet=True)
    cli.run("sweep", scn, out_dir=tmp_path / "t2", threads=3, quiet=True)
    b1 = (tmp_path / "t1" / "sweep.csv").read_bytes()
    assert b1 == (tmp_path / "t2" / "sweep.csv").read_bytes()

    lines = b1.decode().splitlines()
    assert lines[0] == "eta,branch_id,residual,stable,l1_margin,x_a1_p1,x_a2_p1"
    rows = [ln.split(",") for ln in lines[1:]]
    assert {r[3] for r in rows} <= {"0", "1"}
    etas = np.array([float(r[0]) for r in rows])
    assert etas.max() == pytest.approx(2.0) and etas.min() == pytest.approx(1e-3)
    # constant costs keep a single branch after dedup
    assert {r[1] for r in rows} == {"0"}
    assert len(rows) == 30


def test_bifurcation_csv(tmp_path):
    scn = get_scenario("constant")
    assert cli.run("bifurcation", scn, out_dir=tmp_path, quiet=True) == 0
    lines = (tmp_path / "bifurcation.csv").read_text().splitlines()
    assert lines[0] == "eta,n_fixed_points,n_stable"
    assert len(lines) == 1 + 30            # scenario sets steps = 30
    for ln in lines[1:]:
        _, nf, ns = ln.split(",")
        assert nf == "1" and ns == "1"


# ---------------------------------------------------------------------------
# classify / verify


def test_classify_wheatstone(tmp_path):
    scn = get_scenario("wheatstone")
    assert cli.run("classify", scn, out_dir=tmp_path, quiet=True) == 0
    text = (tmp_path / "classify.txt").read_text()
    assert "topology: other" in text
    assert "route r1: e1,e3,e5" in text
    assert "route r2: e1,e4" in text
    assert "x0 nash: false" in text


def test_classify_series2_stages(tmp_path):
    scn = get_scenario("series2")
    cli.run("classify", scn, out_dir=tmp_path, quiet=True)
    text = (tmp_path / "classify.txt").read_text()
    assert "topology: series_of_parallel" in text
    assert "stage 1: o->m links e1,e2" in text
    assert "stage 2: m->d links e3,e4" in text


def test_classify_explicit_game(tmp_path):
    scn = get_scenario("coordination")
    cli.run("classify", scn, out_dir=tmp_path, quiet=True)
    text = (tmp_path / "classify.txt").read_text()
    assert "kind: explicit" in text
    assert "x0 monomorphic: false" in text


@pytest.mark.parametrize("name", ["pigou", "series2"])
def test_verify_passes(tmp_path, name):
    scn = get_scenario(name)
    assert cli.run("verify", scn, out_dir=tmp_path, quiet=True) == 0
    text = (tmp_path / "verify.txt").read_text()
    assert "PASS exact_target" in text
    assert "PASS trajectory_validity" in text
    assert "PASS fixed_point" in text
    assert "FAIL" not in text
    if name == "series2":
        assert "INFO decoupled: true" in text


# ---------------------------------------------------------------------------
# fixed-point and exit codes


def test_fixed_point_csv(tmp_path):
    scn = get_scenario("pigou")
    assert cli.run("fixed-point", scn, out_dir=tmp_path, quiet=True) == 0
    lines = (tmp_path / "fixed_point.csv").read_text().splitlines()
    assert lines[0].startswith("eta,residual,iterations,converged,l1_log_norm,"
                               "spectral_abscissa,locally_stable,x_")
    vals = lines[1].split(",")
    assert float(vals[0]) == 0.25
    assert float(vals[1]) <= 1e-8
    assert vals[3] == "1"


def test_unknown_command_raises():
    scn = get_scenario("constant")
    with pytest.raises(gd.ScenarioError, match="frobnicate"):
        cli.run("frobnicate", scn)


def test_main_exit_1_on_bad_scenario(tmp_path, capsys):
    bad = tmp_path / "bad.scn"
    bad.write_text("[whatever]\nz\n")
    code = cli.main(["simulate", "--scenario", str(bad), "--out", str(tmp_path)])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_main_exit_2_on_unconverged_solve(tmp_path, monkeypatch, capsys):
    scn_path = SCENARIO_DIR / "pigou.scn"
    monkeypatch.setattr(
        cli, "fixed_point",
        lambda game, eta, x0, **kw: real_fixed_point(game, eta, x0, max_iter=1))
    code = cli.main(["fixed-point", "--scenario", str(scn_path),
                     "--out", str(tmp_path), "--quiet"])
    assert code == 2
    assert "numerical failure" in capsys.readouterr().err
    # the partial result is still written for inspection
    lines = (tmp_path / "fixed_point.csv").read_text().splitlines()
    assert lines[1].split(",")[3] == "0"


# ---------------------------------------------------------------------------
# reproduce-wheatstone and the console script


def test_reproduce_wheatstone_smoke(tmp_path):
    text = (SCENARIO_DIR / "wheatstone.scn").read_text()
    text = text.replace("steps = 60", "steps = 12")
    text = text.replace("eta_lo = 0.001", "eta_lo = 0.05")
    p = tmp_path / "wheat.scn"
    p.write_text(text)
    scn = gd.load_scenario(p)
    assert cli.run("reproduce-wheatstone", scn, out_dir=tmp_path, quiet=True) == 0
    for fname in ("wheatstone_traj_1.csv", "wheatstone_traj_2.csv",
                  "wheatstone_sweep.csv"):
        assert (tmp_path / fname).is_file()
    header = (tmp_path / "wheatstone_traj_1.csv").read_text().splitlines()[0]
    assert header.endswith("y_e1,y_e2,y_e3,y_e4,y_e5")


@pytest.mark.skipif(shutil.which("gamedyn") is None,
                    reason="console script not on PATH")
def test_console_script(tmp_path):
    _, scn_path = short_pigou(tmp_path)
    proc = subprocess.run(
        ["gamedyn", "simulate", "--scenario", str(scn_path),
         "--out", str(tmp_path), "--quiet"],
        capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "trajectory.csv").is_file()
