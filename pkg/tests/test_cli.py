import json
import subprocess
import sys

import numpy as np
import pytest

from tensormix import cli, io
from tensormix.exceptions import SolverError
from tensormix.model import MixtureParams
from tensormix.tensor_core import Shape

SCENARIO = dict(p=8, M=3, c=3, n_train=120, n_val=80, n_test=100, n_active=3, delta1=0.4)
FAST = ["--n-lambda", "4", "--lambda-min-ratio", "0.1", "--tol", "1e-6", "--max-iter", "200"]


@pytest.fixture(scope="module")
def simdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("sim")
    (root / "scenario.json").write_text(json.dumps(SCENARIO))
    assert cli.main(["simulate", "--scenario", str(root / "scenario.json"), "--seed", "3",
                     "--out", str(root / "data")]) == 0
    return root / "data"


def run(*argv):
    return cli.main([str(a) for a in argv])


class TestSimulate:
    def test_outputs(self, simdir):
        assert {p.name for p in simdir.iterdir()} == {"train.csv", "val.csv", "test.csv",
                                                      "truth.json", "manifest.json"}
        man = json.loads((simdir / "manifest.json").read_text())
        assert man["seed"] == 3 and set(man["sha256"]) == {"train", "val", "test", "truth"}
        assert len((simdir / "val.csv").read_text().splitlines()) == 81

    def test_default_sizes(self, tmp_path):
        (tmp_path / "s.json").write_text(json.dumps({"p": 10}))
        assert run("simulate", "--scenario", tmp_path / "s.json", "--out", tmp_path / "o") == 0
        counts = [len((tmp_path / "o" / f).read_text().splitlines()) - 1
                  for f in ("train.csv", "val.csv", "test.csv")]
        assert counts == [300, 200, 1000]

    def test_identical_reruns(self, simdir, tmp_path):
        (tmp_path / "s.json").write_text(json.dumps(SCENARIO))
        run("simulate", "--scenario", tmp_path / "s.json", "--seed", 3, "--out", tmp_path / "o")
        for f in ("train.csv", "val.csv", "test.csv", "truth.json"):
            assert (tmp_path / "o" / f).read_bytes() == (simdir / f).read_bytes()

    @pytest.mark.parametrize("rec", [{"R_true": 3, "delta1": 0.7}, {"unknown": 1}])
    def test_bad_scenario(self, tmp_path, rec):
        (tmp_path / "s.json").write_text(json.dumps(rec))
        assert run("simulate", "--scenario", tmp_path / "s.json", "--out", tmp_path / "o") == 2


class TestFit:
    def test_path_fit_and_determinism(self, simdir, tmp_path):
        args = ["fit", "--train", simdir / "train.csv", "--val", simdir / "val.csv",
                "--R", "1,2", "--seed", 1, *FAST]
        assert run(*args, "--out", tmp_path / "a") == 0
        assert run(*args, "--out", tmp_path / "b", "--threads", 2) == 0
        for f in ("model.json", "path.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        theta, meta = io.load_model(tmp_path / "a" / "model.json")
        assert meta["selected_R"] in (1, 2) and theta.intercept
        rows = (tmp_path / "a" / "path.csv").read_text().splitlines()
        assert len(rows) == 1 + 8

    def test_single_lambda(self, simdir, tmp_path):
        assert run("fit", "--train", simdir / "train.csv", "--lambda", 0.05, "--R", 2,
                   "--out", tmp_path) == 0
        assert not (tmp_path / "path.csv").exists()
        assert io.load_model(tmp_path / "model.json")[0].R == 2

    def test_sep_group_baseline(self, simdir, tmp_path):
        assert run("fit", "--train", simdir / "train.csv", "--val", simdir / "val.csv",
                   "--penalty", "sep-group", *FAST, "--out", tmp_path) == 0
        _, meta = io.load_model(tmp_path / "model.json")
        assert len(meta["lambda_"]) == 3

    def test_needs_val(self, simdir, tmp_path):
        assert run("fit", "--train", simdir / "train.csv", "--out", tmp_path) == 2

    def test_bad_penalty(self, simdir, tmp_path):
        with pytest.raises(SystemExit) as e:
            run("fit", "--train", simdir / "train.csv", "--penalty", "ridge", "--out", tmp_path)
        assert e.value.code == 2

    def test_malformed_data(self, tmp_path):
        (tmp_path / "bad.csv").write_text("y:a,x:u\n1,2\n1,zz\n")
        assert run("fit", "--train", tmp_path / "bad.csv", "--lambda", 0.1,
                   "--out", tmp_path / "o") == 3

    def test_solver_failure(self, simdir, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise SolverError("line search exhausted")

        monkeypatch.setattr(cli, "fit", boom)
        assert run("fit", "--train", simdir / "train.csv", "--lambda", 0.1, "--R", 2,
                   "--out", tmp_path) == 4


class TestThreads:
    def test_env_and_flag(self, monkeypatch):
        monkeypatch.setenv(cli.ENV_THREADS, "3")
        assert cli.resolve_threads(None) == 3
        assert cli.resolve_threads(2) == 2
        monkeypatch.delenv(cli.ENV_THREADS)
        assert cli.resolve_threads(None) == 1

    def test_bad_env(self, simdir, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.ENV_THREADS, "many")
        assert run("fit", "--train", simdir / "train.csv", "--lambda", 0.1,
                   "--out", tmp_path) == 2


class TestPredictEvaluate:
    def test_truth_scores_zero(self, simdir, tmp_path):
        assert run("evaluate", "--model", simdir / "truth.json", "--truth", simdir / "truth.json",
                   "--test", simdir / "test.csv", "--out", tmp_path / "r.json") == 0
        m = json.loads((tmp_path / "r.json").read_text())["metrics"]
        assert m["sqrt_avg_kl"] == 0.0
        assert m["hellinger_avg"] == pytest.approx(0.0, abs=1e-7)
        assert 0 <= m["joint_error_rate"] <= 1

    def test_fitted_model_against_truth(self, simdir, tmp_path):
        run("fit", "--train", simdir / "train.csv", "--val", simdir / "val.csv", "--R", 2,
            *FAST, "--out", tmp_path)
        assert run("evaluate", "--model", tmp_path / "model.json", "--truth",
                   simdir / "truth.json", "--test", simdir / "test.csv",
                   "--out", tmp_path / "r.json", "--tensors", tmp_path / "t.jsonl") == 0
        m = json.loads((tmp_path / "r.json").read_text())["metrics"]
        assert 0 < m["sqrt_avg_kl"] < 2
        assert len((tmp_path / "t.jsonl").read_text().splitlines()) == 100

    def test_null_model_joint_error(self, tmp_path):
        M, n = 14, 4000
        rng = np.random.default_rng(0)
        rows = ["y:" + ",y:".join(f"b{m}" for m in range(M)) + ",x:u"]
        Y = rng.integers(1, 3, (n, M))
        rows += [",".join(map(str, y)) + f",{float(x)!r}" for y, x in zip(Y, rng.normal(size=n))]
        (tmp_path / "d.csv").write_text("\n".join(rows) + "\n")
        null = MixtureParams([1.0], np.zeros((2, 1, 2 * M)), Shape((2,) * M), intercept=True)
        io.save_model(tmp_path / "m.json", null)
        assert run("evaluate", "--model", tmp_path / "m.json", "--test", tmp_path / "d.csv",
                   "--out", tmp_path / "r.json") == 0
        m = json.loads((tmp_path / "r.json").read_text())["metrics"]
        assert m["joint_error_rate"] == pytest.approx(1 - 0.5**M, abs=5e-4)
        assert m["deviance"] == pytest.approx(2 * n * M * np.log(2))

    def test_predict(self, simdir, tmp_path):
        assert run("predict", "--model", simdir / "truth.json", "--data", simdir / "test.csv",
                   "--out", tmp_path / "p.csv") == 0
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert len(lines) == 101 and lines[0].startswith("y:")
        assert all(1 <= int(v) <= 3 for ln in lines[1:] for v in ln.split(","))

    def test_dimension_mismatch(self, simdir, tmp_path):
        (tmp_path / "d.csv").write_text("y:a,x:u\n1,0.1\n")
        assert run("predict", "--model", simdir / "truth.json", "--data", tmp_path / "d.csv",
                   "--out", tmp_path / "p.csv") == 3


class TestBenchmark:
    def test_small_grid(self, tmp_path):
        grid = dict(scenarios=[dict(SCENARIO, n_test=50)], vary={"delta1": [0.3, 0.5]},
                    methods=["Mix-1", "Mix-2", "Sep-Group"], reps=2)
        (tmp_path / "g.json").write_text(json.dumps(grid))
        args = ["benchmark", "--grid", tmp_path / "g.json", "--seed", 4, *FAST]
        assert run(*args, "--out", tmp_path / "a") == 0
        assert run(*args, "--out", tmp_path / "b", "--threads", 2) == 0
        for f in ("replicates.csv", "summary.csv", "report.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        reps = (tmp_path / "a" / "replicates.csv").read_text().splitlines()
        assert len(reps) == 1 + 2 * 3 * 2

    def test_bad_grid(self, tmp_path):
        (tmp_path / "g.json").write_text(json.dumps({"methods": ["Mix-x"]}))
        assert run("benchmark", "--grid", tmp_path / "g.json", "--out", tmp_path / "o") == 2
        (tmp_path / "g.json").write_text(json.dumps({"colour": 1}))
        assert run("benchmark", "--grid", tmp_path / "g.json", "--out", tmp_path / "o") == 2


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "tensormix", "--version"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "tensormix" in out.stdout
    out = subprocess.run([sys.executable, "-m", "tensormix", "fit", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 2
