import json
import struct

import numpy as np
import pytest

from readmix import cli
from readmix.data import load_csv

FAST = ["--chains", "2", "--warmup", "150", "--draws", "100"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("simulate", "--model", "het-overwrite", "--out", root / "sim", "--seed", 1,
               "--subjects", 12, "--items", 8) == 0
    assert run("fit", "--model", "hom-overwrite", "--data", root / "sim" / "data.csv",
               "--out", root / "hom", "--seed", 2, "--plot", *FAST) in (0, 2)
    return root


class TestSimulate:
    def test_outputs(self, workspace):
        sim = workspace / "sim"
        assert sorted(p.name for p in sim.iterdir()) == ["config.json", "data.csv",
                                                         "latent.csv", "truth.json"]
        truth = json.loads((sim / "truth.json").read_text())
        assert truth["truth"]["diffprob"] == pytest.approx(0.2)
        assert len(load_csv(sim / "data.csv")) == 96

    def test_byte_identical(self, tmp_path):
        for name in ("a", "b"):
            assert run("simulate", "--model", "standard", "--out", tmp_path / name,
                       "--seed", 5, "--subjects", 6, "--items", 4) == 0
        for f in ("data.csv", "latent.csv", "truth.json", "config.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_percolation_sidecar(self, tmp_path):
        assert run("simulate", "--model", "percolation", "--out", tmp_path, "--seed", 3,
                   "--param", "prob_perc=0.6") == 0
        rows = np.genfromtxt(tmp_path / "latent.csv", delimiter=",", skip_header=1,
                             dtype=str)
        component = rows[:, 2].astype(int)
        assert component[rows[:, 1] == "-1"].sum() == 0
        assert component[rows[:, 1] == "+1"].sum() > 0

    def test_het_slow_fraction(self, tmp_path):
        from scipy import stats
        assert run("simulate", "--model", "het-overwrite", "--out", tmp_path, "--seed", 4,
                   "--subjects", 100, "--items", 100) == 0
        rows = np.genfromtxt(tmp_path / "latent.csv", delimiter=",", skip_header=1, dtype=str)
        minus = rows[:, 1] == "-1"
        k = int(rows[minus, 2].astype(int).sum())
        lo, hi = stats.binomtest(k, int(minus.sum())).proportion_ci(0.99)
        assert lo <= 0.35 <= hi

    def test_unknown_parameter(self, tmp_path):
        assert run("simulate", "--model", "standard", "--out", tmp_path,
                   "--param", "delta=0.3") == 1


class TestFit:
    def test_outputs(self, workspace):
        out = workspace / "hom"
        assert sorted(p.name for p in out.iterdir()) == [
            "config.json", "draws.csv", "intervals.svg", "loglik.bin", "summary.json"]
        summary = json.loads((out / "summary.json").read_text())
        assert set(summary["parameters"]) == {"beta", "delta", "prob_hi", "prob_lo",
                                              "sigma_e", "sigma_u", "sigma_w", "diffprob"}
        assert set(summary["parameters"]["beta"]) >= {"mean", "sd", "q2.5", "q97.5",
                                                      "rhat", "ess_bulk"}
        assert "u[12]" in summary["random_effects"]
        assert summary["config"]["seed"] == 2

    def test_loglik_layout(self, workspace):
        raw = (workspace / "hom" / "loglik.bin").read_bytes()
        magic, version, s, n = struct.unpack("<4sIII", raw[:16])
        assert (magic, version, s, n) == (b"RMLL", 1, 200, 96)
        assert len(raw) == 16 + 8 * s * n
        ll = cli.read_loglik(workspace / "hom" / "loglik.bin")
        assert np.all(np.isfinite(ll)) and np.all(ll < 0)

    def test_draws_long_format(self, workspace):
        with open(workspace / "hom" / "draws.csv") as fh:
            header = fh.readline().strip()
            first = fh.readline().strip().split(",")
        assert header == "chain,iter,parameter,value"
        assert first[:3] == ["1", "1", "beta"]

    def test_svg_has_no_date(self, workspace):
        svg = (workspace / "hom" / "intervals.svg").read_text()
        assert "<dc:date>" not in svg
        assert "diffprob" in svg

    def test_rerun_from_embedded_config(self, workspace, tmp_path):
        out = workspace / "hom"
        assert run("fit", "--config", out / "summary.json", "--out", tmp_path) in (0, 2)
        for f in ("draws.csv", "summary.json", "loglik.bin", "intervals.svg", "config.json"):
            assert (tmp_path / f).read_bytes() == (out / f).read_bytes(), f

    def test_flags_override_config(self, workspace, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"model": "standard", "seed": 11, "chains": 3,
                                   "data": str(workspace / "sim" / "data.csv")}))
        assert run("fit", "--config", cfg, "--chains", 1, "--warmup", 150, "--draws", 50,
                   "--out", tmp_path / "o") == 0
        resolved = json.loads((tmp_path / "o" / "config.json").read_text())
        assert (resolved["chains"], resolved["seed"], resolved["model"]) == (1, 11, "standard")

    def test_malformed_csv(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("subject,item,condition,rt\n1,1,+1,300\n1,2,-1,0\n")
        assert run("fit", "--model", "standard", "--data", bad, "--out",
                   tmp_path / "out", *FAST) == 1
        assert "line 3" in capsys.readouterr().err
        assert not (tmp_path / "out").exists()
        assert [p.name for p in tmp_path.iterdir()] == ["bad.csv"]

    def test_missing_data(self, tmp_path):
        assert run("fit", "--model", "standard", "--data", tmp_path / "nope.csv",
                   "--out", tmp_path / "out") == 1

    def test_usage_errors_exit_1(self, tmp_path):
        assert run("fit", "--data", "x.csv", "--out", tmp_path) == 1
        with pytest.raises(SystemExit) as exc:
            run("fit", "--model", "bogus")
        assert exc.value.code == 1
        cfg = tmp_path / "c.json"
        cfg.write_text('{"colour": 1}')
        assert run("fit", "--config", cfg, "--out", tmp_path / "o") == 1

    def test_non_convergence_exit_2(self, workspace, tmp_path, monkeypatch, capsys):
        monkeypatch.setattr(cli, "RHAT_WARN", 0.5)
        code = run("fit", "--model", "standard", "--data", workspace / "sim" / "data.csv",
                   "--out", tmp_path, *FAST)
        assert code == 2
        assert "not converged" in capsys.readouterr().err
        assert json.loads((tmp_path / "summary.json").read_text())["converged"] is False

    def test_null_effect_interval_contains_zero(self, tmp_path):
        assert run("simulate", "--model", "standard", "--out", tmp_path / "sim", "--seed", 8,
                   "--param", "beta_2=0") == 0
        assert run("fit", "--model", "standard", "--data", tmp_path / "sim" / "data.csv",
                   "--out", tmp_path / "fit", "--warmup", 300, "--draws", 300) == 0
        row = json.loads((tmp_path / "fit" / "summary.json").read_text())["parameters"]["beta_2"]
        assert row["q2.5"] < 0 < row["q97.5"]


class TestCompare:
    def test_same_fit_twice(self, workspace, capsys):
        out = workspace / "hom"
        assert run("compare", out, out) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].split() == ["model_a", "model_b", "elpd_diff", "SE"]
        assert lines[1].split()[-2:] == ["0.00", "0.00"]

    def test_writes_report(self, workspace, tmp_path):
        assert run("fit", "--model", "het-overwrite", "--data",
                   workspace / "sim" / "data.csv", "--out", tmp_path / "het", *FAST) in (0, 2)
        assert run("compare", workspace / "hom", tmp_path / "het", "--out",
                   tmp_path / "cmp") == 0
        report = json.loads((tmp_path / "cmp" / "compare.json").read_text())
        assert [(r["model_a"], r["model_b"]) for r in report["rows"]] == [
            ("hom-overwrite", "het-overwrite")]
        assert set(report["models"]) == {"hom-overwrite", "het-overwrite"}

    def test_datasets_differ(self, workspace, tmp_path, capsys):
        assert run("simulate", "--model", "standard", "--out", tmp_path / "sim", "--seed", 9,
                   "--subjects", 6, "--items", 4) == 0
        assert run("fit", "--model", "standard", "--data", tmp_path / "sim" / "data.csv",
                   "--out", tmp_path / "fit", *FAST) in (0, 2)
        assert run("compare", workspace / "hom", tmp_path / "fit") == 1
        assert "datasets differ" in capsys.readouterr().err

    def test_needs_two(self, workspace):
        assert run("compare", workspace / "hom") == 1


class TestDiagnose:
    def test_report(self, workspace, capsys):
        assert run("diagnose", workspace / "hom") in (0, 2)
        out = capsys.readouterr().out
        assert "divergent transitions" in out
        assert "Pareto k-hat over 96 trials" in out

    def test_single_chain(self, workspace, tmp_path, capsys):
        assert run("fit", "--model", "standard", "--data", workspace / "sim" / "data.csv",
                   "--out", tmp_path, "--chains", 1, "--warmup", 150, "--draws", 100) == 0
        capsys.readouterr()
        assert run("diagnose", tmp_path) == 0
        line = next(x for x in capsys.readouterr().out.splitlines() if x.startswith("beta_1"))
        assert "n/a" in line.split()

    def test_tree_depth_saturation(self, workspace, tmp_path, capsys):
        run("fit", "--model", "standard", "--data", workspace / "sim" / "data.csv",
            "--out", tmp_path, "--max-tree-depth", 1, *FAST)
        capsys.readouterr()
        run("diagnose", tmp_path)
        out = capsys.readouterr().out
        line = next(x for x in out.splitlines() if x.startswith("max tree depth 1"))
        hits = int(line.split("reached in ")[1].split(" of")[0])
        assert hits > 100

    def test_missing(self, tmp_path):
        assert run("diagnose", tmp_path) == 1
