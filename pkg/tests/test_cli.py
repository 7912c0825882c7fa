import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from pyjini import cli
from pyjini import models as M
from pyjini.config import load_experiments

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

UNIFORM = """\
[experiment]
name = toy
n = 20
R = 30
seed = 4

[model]
family = uniform_toy
theta0 = 1.0

[method.MLE]
kind = fit
estimator = toy_mle

[method.JINI]
kind = jini
estimator = toy_mle
moment = analytic
"""

MISCLASSIFIED = """\
[experiment]
n = {n}
p = 3
B = {B}
seed = 8

[model]
family = misclassified_logistic
theta0 = 0.3, -1.5, 1
fnr = 0.05

[design]
kind = toeplitz
scale = 4

[method.NMLE]
kind = fit
estimator = naive_mle_misclassified
ci = bootstrap

[method.JINI]
kind = jini
estimator = naive_mle_misclassified
H = {H}
tol = 5e-3
ci = bootstrap
boot_H = 50
boot_tol = 0.05
boot_max_iter = 10
"""

BETA = """\
[experiment]
n = 100
p = 3
seed = 2

[model]
family = beta_rounded
theta0 = 0.2, 1, -1, 10

[design]
kind = iid
scale = 2

[method.NMLE]
kind = fit
estimator = beta_naive_mle
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestExperiment:
    def test_uniform_toy(self, tmp_path, capsys):
        cfg = write(tmp_path, "toy.ini", UNIFORM)
        out_csv = tmp_path / "toy.csv"
        code, out, err = run(capsys, "experiment", cfg, "-o", out_csv)
        assert code == cli.EXIT_OK
        assert out_csv.read_text().splitlines()[0] == \
            "method,coord,true_value,mean_est,abs_bias,std_err,coverage,avg_ci_len,failures"
        summary = json.loads(out)
        assert summary["experiments"][0]["R"] == 30
        assert "running toy" in err

    def test_missing_n(self, tmp_path, capsys):
        cfg = write(tmp_path, "bad.ini", UNIFORM.replace("n = 20\n", ""))
        code, out, err = run(capsys, "experiment", cfg, "-o", tmp_path / "x.csv")
        assert code == cli.EXIT_INPUT
        assert "'n'" in err
        assert out == ""

    def test_override_r(self, tmp_path, capsys):
        cfg = write(tmp_path, "toy.ini", UNIFORM)
        out_csv = tmp_path / "toy.csv"
        code, _, _ = run(capsys, "experiment", cfg, "-o", out_csv, "--override", "R=10")
        assert code == 0
        meta = json.loads(Path(str(out_csv) + ".meta.json").read_text())
        assert meta["config"]["R"] == 10
        assert meta["config"]["n"] == 20
        assert meta["config"]["base_seed"] == 4

    def test_unknown_override(self, tmp_path, capsys):
        cfg = write(tmp_path, "toy.ini", UNIFORM)
        code, _, err = run(capsys, "experiment", cfg, "--set", "colour=blue")
        assert code == cli.EXIT_INPUT
        assert "colour" in err

    def test_unknown_key(self, tmp_path, capsys):
        cfg = write(tmp_path, "toy.ini", UNIFORM.replace("seed = 4", "seed = 4\nspeed = 9"))
        code, _, err = run(capsys, "experiment", cfg)
        assert code == cli.EXIT_INPUT
        assert "speed" in err

    def test_fnr_sweep(self, tmp_path, capsys):
        text = MISCLASSIFIED.format(n=60, B=10, H=10).replace("fnr = 0.05", "fnr = 0.03, 0.1")
        text = text.replace("ci = bootstrap\n", "")
        cfg = write(tmp_path, "sweep.ini", text)
        out_csv = tmp_path / "sweep.csv"
        code, out, _ = run(capsys, "experiment", cfg, "-o", out_csv, "--set", "R=2")
        assert code == 0
        assert (tmp_path / "sweep_fnr0.03.csv").exists()
        assert (tmp_path / "sweep_fnr0.1.csv").exists()
        assert len(json.loads(out)["experiments"]) == 2

    def test_missing_config(self, tmp_path, capsys):
        code, _, err = run(capsys, "experiment", tmp_path / "nope.ini")
        assert code == cli.EXIT_INPUT
        assert "nope.ini" in err


class TestSimulateFit:
    def test_round_trip(self, tmp_path, capsys):
        cfg = write(tmp_path, "mis.ini", MISCLASSIFIED.format(n=150, B=20, H=40))
        data = tmp_path / "data.csv"
        assert run(capsys, "simulate", cfg, "-o", data)[0] == 0
        fitted = tmp_path / "fit.csv"
        code, out, _ = run(capsys, "fit", cfg, data, "-o", fitted)
        assert code == 0
        with fitted.open() as fh:
            rows = list(csv.DictReader(fh))
        assert [r["method"] for r in rows] == ["NMLE"] * 3 + ["JINI"] * 3
        for r in rows:
            lo, hi = float(r["lower"]), float(r["upper"])
            assert lo < float(r["estimate"]) < hi
            assert r["excludes_zero"] == str(int(not lo <= 0 <= hi))
        assert set(json.loads(out)["estimates"]) == {"NMLE", "JINI"}

    def test_seeded_twice_identical(self, tmp_path, capsys):
        cfg = write(tmp_path, "mis.ini", MISCLASSIFIED.format(n=50, B=10, H=10))
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        run(capsys, "simulate", cfg, "-o", a)
        run(capsys, "simulate", cfg, "-o", b)
        assert a.read_bytes() == b.read_bytes()

    def test_beta_grid(self, tmp_path, capsys):
        cfg = write(tmp_path, "beta.ini", BETA)
        data = tmp_path / "beta.csv"
        assert run(capsys, "simulate", cfg, "-o", data)[0] == 0
        y, X = M.read_dataset_csv(data)
        assert np.all(np.isin(y, M.GRID))
        assert X.shape == (100, 3)
        assert run(capsys, "fit", cfg, data, "-o", tmp_path / "f.csv")[0] == 0

    def test_toy_round_trip(self, tmp_path, capsys):
        cfg = write(tmp_path, "toy.ini", UNIFORM)
        data = tmp_path / "toy.csv"
        assert run(capsys, "simulate", cfg, "-o", data)[0] == 0
        code, out, _ = run(capsys, "fit", cfg, data, "-o", tmp_path / "f.csv")
        assert code == 0
        est = json.loads(out)["estimates"]
        y, _ = M.read_dataset_csv(data, require_design=False)
        assert est["MLE"][0] == y.max()
        assert est["JINI"][0] == pytest.approx(y.max() * 21 / 20, rel=1e-6)

    def test_zero_fnr_is_logistic(self, tmp_path, capsys):
        text = MISCLASSIFIED.format(n=150, B=10, H=20)
        cfg = write(tmp_path, "mis.ini", text)
        logistic = write(tmp_path, "log.ini", text.replace("misclassified_logistic", "logistic")
                         .replace("naive_mle_misclassified", "logistic_mle").replace("fnr = 0.05\n", ""))
        data = tmp_path / "data.csv"
        run(capsys, "simulate", cfg, "-o", data)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        assert run(capsys, "fit", cfg, data, "-o", a, "--set", "fnr=0")[0] == 0
        assert run(capsys, "fit", logistic, data, "-o", b)[0] == 0
        assert a.read_text() == b.read_text()

    def test_malformed_row(self, tmp_path, capsys):
        cfg = write(tmp_path, "mis.ini", MISCLASSIFIED.format(n=50, B=10, H=10))
        data = tmp_path / "data.csv"
        run(capsys, "simulate", cfg, "-o", data)
        lines = data.read_text().splitlines()
        lines[4] = lines[4].split(",", 1)[0] + ",oops"
        data.write_text("\n".join(lines) + "\n")
        code, _, err = run(capsys, "fit", cfg, data, "-o", tmp_path / "f.csv")
        assert code == cli.EXIT_INPUT
        assert "line 5" in err

    def test_estimation_failure_exit_3(self, tmp_path, capsys):
        # perfectly separated responses make the logistic MLE fail
        text = MISCLASSIFIED.format(n=50, B=10, H=10).replace("misclassified_logistic", "logistic") \
            .replace("naive_mle_misclassified", "logistic_mle").replace("fnr = 0.05\n", "")
        cfg = write(tmp_path, "log.ini", text)
        data = tmp_path / "data.csv"
        run(capsys, "simulate", cfg, "-o", data)
        y, X = M.read_dataset_csv(data)
        M.write_dataset_csv(data, (X[:, 1] > 0).astype(float), X)
        code, out, err = run(capsys, "fit", cfg, data, "-o", tmp_path / "f.csv")
        assert code == cli.EXIT_RUNTIME
        assert "Separation" in err
        assert out == ""

    def test_jini_recovers_truth(self, tmp_path, capsys):
        cfg = write(tmp_path, "mis.ini", MISCLASSIFIED.format(n=2000, B=50, H=100))
        data = tmp_path / "data.csv"
        run(capsys, "simulate", cfg, "-o", data)
        fitted = tmp_path / "fit.csv"
        assert run(capsys, "fit", cfg, data, "-o", fitted)[0] == 0
        with fitted.open() as fh:
            rows = [r for r in csv.DictReader(fh) if r["method"] == "JINI"]
        for r, truth in zip(rows, (0.3, -1.5, 1.0)):
            assert abs(float(r["estimate"]) - truth) < 3 * float(r["se"])


class TestReport:
    def test_report_json(self, tmp_path, capsys):
        cfg = write(tmp_path, "toy.ini", UNIFORM)
        out_csv = tmp_path / "toy.csv"
        run(capsys, "experiment", cfg, "-o", out_csv)
        code, out, _ = run(capsys, "report", out_csv)
        assert code == 0
        doc = json.loads(out)
        assert [(r["method"], r["coord"]) for r in doc["rows"]] == [("MLE", "theta"), ("JINI", "theta")]
        assert doc["rows"][0]["coverage"] is None

    def test_missing_report(self, tmp_path, capsys):
        assert run(capsys, "report", tmp_path / "none.csv")[0] == cli.EXIT_INPUT


class TestEntryPoint:
    def test_module_entry(self, tmp_path):
        cfg = write(tmp_path, "toy.ini", UNIFORM)
        proc = subprocess.run([sys.executable, "-m", "pyjini.cli", "experiment", str(cfg),
                               "-o", str(tmp_path / "r.csv")], capture_output=True, text=True)
        assert proc.returncode == 0
        json.loads(proc.stdout)

    def test_unknown_verb(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["dance"])
        assert exc.value.code == 2


class TestShippedConfigs:
    @pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.ini")), ids=lambda p: p.stem)
    def test_loads(self, path):
        (cfg,) = load_experiments(path)
        assert cfg.name == path.stem
        assert cfg.base_seed == int(path.stem[5])
