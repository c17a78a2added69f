import json

import numpy as np
import pytest

from mpbt import ModelParams
from mpbt.cli import main
from mpbt.identify import apply_permutation
from mpbt.params import save_params


@pytest.fixture
def fig1_file(tmp_path, fig1):
    path = tmp_path / "fig1.json"
    save_params(fig1, path)
    return path


def run(*args):
    return main([str(a) for a in args])


def test_validate_ok(fig1_file, tmp_path, capsys):
    assert run("validate", "--params", fig1_file) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["ok"] and report["config"]["params"] == str(fig1_file)


def test_validate_tie_names_assumption_4(tmp_path, capsys):
    path = tmp_path / "tie.json"
    save_params(ModelParams.from_rates([0.3, 0.3], [[0, 0.1], [0.2, 0]]), path)
    assert run("validate", "--params", path, "--out", tmp_path / "r.json") == 1
    assert "Assumption 4" in capsys.readouterr().err
    failed = [a["number"] for a in json.loads((tmp_path / "r.json").read_text())["assumptions"] if not a["passed"]]
    assert 4 in failed


def test_validate_parse_errors(tmp_path, capsys):
    missing = tmp_path / "missing.json"
    missing.write_text(json.dumps({"m": 2, "lambda": [0.1, 0.5]}))
    assert run("validate", "--params", missing) == 2
    bad = tmp_path / "bad.json"
    bad.write_text('{"m": 2,\n "lambda": [0.1 0.5]}')
    assert run("validate", "--params", bad) == 2
    assert "line 2" in capsys.readouterr().err
    assert run("validate", "--params", tmp_path / "nope.json") == 2


def test_simulate_outputs_and_determinism(fig1_file, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run("simulate", "--params", fig1_file, "--depth", 8, "--replicates", 3, "--seed", 11, "--out", out) == 0
        outs.append(out)
    files = sorted(p.name for p in outs[0].iterdir())
    assert files == sorted(p.name for p in outs[1].iterdir())
    assert "tree_00002.nwk" in files and "tree_00002.json" in files
    for name in files:
        if name != "summary.json":
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    sa = json.loads((outs[0] / "summary.json").read_text())
    sb = json.loads((outs[1] / "summary.json").read_text())
    sa["config"].pop("out"), sb["config"].pop("out")
    assert sa == sb
    assert sa["config"]["seed"] == 11
    assert len(sa["R_T"]) == 3 and len(sa["leaf_counts"]) == 3
    np.testing.assert_allclose(sa["analytic_u"], [0.359612, 0.640388], atol=1e-6)
    nwk = (outs[0] / "tree_00000.nwk").read_text()
    assert nwk.strip().endswith(";") and nwk.count("n") == sa["leaf_counts"][0]


def test_simulate_records_generated_seed(fig1_file, tmp_path):
    assert run("simulate", "--params", fig1_file, "--depth", 3, "--out", tmp_path / "s") == 0
    seed = json.loads((tmp_path / "s" / "summary.json").read_text())["config"]["seed"]
    assert isinstance(seed, int)
    assert run("simulate", "--params", fig1_file, "--depth", 3, "--seed", seed, "--out", tmp_path / "t") == 0
    assert (tmp_path / "s" / "tree_00000.json").read_bytes() == (tmp_path / "t" / "tree_00000.json").read_bytes()


def test_simulate_single_type_mean(tmp_path):
    path = tmp_path / "yule.json"
    save_params(ModelParams.from_rates([0.3]), path)
    out = tmp_path / "yule_counts.json"
    assert run("simulate", "--params", path, "--depth", 10, "--replicates", 10**4, "--seed", 1, "--counts-only", "--out", out) == 0
    summary = json.loads(out.read_text())
    assert summary["mean_leaf_count"] == pytest.approx(np.exp(3.0), rel=0.05)


def test_simulate_growth_guard(fig1_file, tmp_path, capsys, monkeypatch):
    assert run("simulate", "--params", fig1_file, "--depth", 40, "--seed", 1, "--out", tmp_path / "x") == 1
    assert "exceeds cap" in capsys.readouterr().err
    monkeypatch.setenv("MPBT_MAX_LINEAGES", "5")
    assert run("simulate", "--params", fig1_file, "--depth", 10, "--seed", 1, "--out", tmp_path / "y") == 1


def test_triples_from_params_and_trees(fig1_file, tmp_path):
    csv = tmp_path / "t.csv"
    assert run("triples", "--params", fig1_file, "--depth", 12, "--replicates", 200, "--seed", 3, "--out", csv) == 0
    lines = csv.read_text().splitlines()
    assert lines[0] == "l0,l1,l2" and len(lines) > 50
    meta = json.loads((tmp_path / "t.csv.json").read_text())
    assert meta["config"]["seed"] == 3 and meta["n_triples"] == len(lines) - 1

    trees = tmp_path / "trees"
    assert run("simulate", "--params", fig1_file, "--depth", 12, "--replicates", 2, "--seed", 4, "--out", trees) == 0
    csv2 = tmp_path / "t2.csv"
    args = ["triples", "--trees", trees / "tree_00000.json", trees / "tree_00001.json",
            "--mode", "all-eligible", "--time", 6, "--seed", 5, "--out", csv2]
    assert run(*args) == 0
    for row in csv2.read_text().splitlines()[1:]:
        l0, l1, l2 = map(float, row.split(","))
        assert l1 < 12 - 6 - l0 and l2 < 12 - 6 - l0


def test_triples_time_beyond_depth(fig1_file, tmp_path):
    assert run("triples", "--params", fig1_file, "--depth", 10, "--time", 10, "--seed", 1, "--out", tmp_path / "t.csv") == 1


def test_density_grid(fig1_file, fig1, tmp_path):
    out = tmp_path / "d.csv"
    args = ["--tau-max", 60, "--points", 41, "--spacing", "quadratic"]
    assert run("density", "--params", fig1_file, *args, "--out", out) == 0
    data = np.loadtxt(out, delimiter=",", skiprows=1)
    assert data.shape == (41**3, 5)
    origin = data[0]
    u = np.array([0.359612, 0.640388])
    assert origin[3] == pytest.approx(np.sum(u * fig1.lam**3), rel=1e-5)
    assert origin[4] == 0.0
    # trapezoid sum; the grid reaches far enough to hold over 99.9% of the mass
    grid = np.unique(data[:, 0])
    assert data[-1, 4] > 0.999
    w = np.zeros(grid.size)
    w[:-1] += np.diff(grid) / 2
    w[1:] += np.diff(grid) / 2
    W = np.einsum("i,j,k->ijk", w, w, w).ravel()
    assert np.sum(W * data[:, 3]) == pytest.approx(1.0, abs=0.02)

    swapped = tmp_path / "swapped.json"
    save_params(apply_permutation(fig1, [1, 0]), swapped)
    out2 = tmp_path / "d2.csv"
    assert run("density", "--params", swapped, *args, "--out", out2) == 0
    np.testing.assert_allclose(np.loadtxt(out2, delimiter=",", skiprows=1), data, rtol=1e-10)


def test_density_negative_bound(fig1_file, tmp_path):
    assert run("density", "--params", fig1_file, "--tau-max", -1, "--out", tmp_path / "d.csv") == 1


def test_fit_and_recover(fig1_file, tmp_path):
    csv = tmp_path / "t.csv"
    assert run("triples", "--params", fig1_file, "--depth", 16, "--replicates", 400, "--seed", 6, "--out", csv) == 0
    out = tmp_path / "fit.json"
    assert run("fit", "--triples", csv, "--types", 2, "--starts", 4, "--seed", 7, "--out", out) == 0
    fit = json.loads(out.read_text())
    assert fit["config"]["seed"] == 7 and fit["starts"] == 4 and fit["wall_time"] > 0
    lam = fit["params_hat"]["lambda"]
    assert lam == sorted(lam)

    rec = tmp_path / "rec.json"
    assert run("recover", "--params", fig1_file, "--replicates", 2000, "--starts", 4, "--seed", 8, "--out", rec) == 0
    report = json.loads(rec.read_text())
    assert report["source"] == "analytic" and report["n_triples"] == 2000
    assert report["config"]["seed"] == 8 and report["max_rel_error"] >= 0


def test_fit_bad_csv(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y\n1,2\n")
    assert run("fit", "--triples", bad, "--out", tmp_path / "f.json") == 2


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        run("--version")
    assert info.value.code == 0
