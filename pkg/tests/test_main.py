import json

import numpy as np
import pandas as pd
import pytest

from grassmann import riemannian_distance, sample_uniform
from main import main
from matrix_io import MatrixStore, read_stiefel, write_points


@pytest.fixture
def cylinder_dir(tmp_path, cylinder):
    points, bases = cylinder
    MatrixStore().save_dataset(tmp_path / "data", points, bases)
    return tmp_path / "data"


@pytest.fixture
def fitted(tmp_path, cylinder_dir, capsys):
    model_dir = tmp_path / "model"
    assert main(["fit", str(cylinder_dir), str(model_dir)]) == 0
    capsys.readouterr()
    return model_dir


def error_of(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


class TestFit:
    def test_cylinder(self, tmp_path, cylinder_dir, capsys):
        assert main(["fit", str(cylinder_dir), str(tmp_path / "model"), "--beta", "2.8"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out == ["n,k,l,r", "2,1,7,2"]
        manifest = json.loads((tmp_path / "model" / "manifest.json").read_text())
        assert manifest["r"] == 2

    def test_single_sample(self, tmp_path, rng, capsys):
        MatrixStore().save_dataset(tmp_path / "one", np.array([[0.5]]), [sample_uniform(6, 3, rng)])
        assert main(["fit", str(tmp_path / "one"), str(tmp_path / "model"), "--format", "json"]) == 0
        assert json.loads(capsys.readouterr().out)["r"] == 3

    def test_corrupt_header(self, cylinder_dir, tmp_path, capsys):
        (cylinder_dir / "basis_2.csv").write_text("# basis 2x1\n1\n0\n")
        assert main(["fit", str(cylinder_dir), str(tmp_path / "model")]) == 2
        response = error_of(capsys)
        assert "basis_2.csv" in response["error"]
        assert response["error_type"] == "MalformedInputError"

    def test_shape_mismatch(self, tmp_path, rng, capsys):
        MatrixStore().save_dataset(tmp_path / "bad", np.array([[0.0], [1.0]]),
                                   [sample_uniform(5, 2, rng), sample_uniform(6, 2, rng)])
        assert main(["fit", str(tmp_path / "bad"), str(tmp_path / "model")]) == 3

    def test_missing_directory(self, tmp_path, capsys):
        assert main(["fit", str(tmp_path / "absent"), str(tmp_path / "model")]) == 2


class TestPredict:
    def test_round_trip_at_training_points(self, tmp_path, fitted, cylinder):
        points, bases = cylinder
        write_points(tmp_path / "targets.csv", points)
        out = tmp_path / "pred.csv"
        dump = tmp_path / "dump"
        assert main(["predict", str(fitted), str(tmp_path / "targets.csv"), str(out),
                     "--dump-bases", str(dump)]) == 0
        table = pd.read_csv(out)
        assert len(table) == 7
        assert list(table.columns) == ["theta_1", "epsilon2", "lambda_1", "prior_dominated"]
        assert (table["epsilon2"] == 0.0).all()
        for i, basis in enumerate(bases):
            assert riemannian_distance(read_stiefel(dump / f"basis_{i}.csv"), basis) < 1e-8

    def test_far_target_is_prior_dominated(self, tmp_path, fitted):
        write_points(tmp_path / "targets.csv", np.array([[2.0], [1e3]]))
        out = tmp_path / "pred.csv"
        assert main(["predict", str(fitted), str(tmp_path / "targets.csv"), str(out)]) == 0
        table = pd.read_csv(out)
        assert len(table) == 2
        assert bool(table["prior_dominated"].iloc[1])

    def test_json_with_interval(self, tmp_path, fitted):
        write_points(tmp_path / "targets.csv", np.array([[2.0], [3.0]]))
        out = tmp_path / "pred.json"
        assert main(["predict", str(fitted), str(tmp_path / "targets.csv"), str(out),
                     "--format", "json", "--interval", "--draws", "200", "--t", "2"]) == 0
        rows = json.loads(out.read_text())
        assert len(rows) == 2
        assert {"epsilon2", "lambda_1", "lambda_2", "interval_95"} <= set(rows[0])

    def test_truncation_out_of_range(self, tmp_path, fitted, capsys):
        write_points(tmp_path / "targets.csv", np.array([[2.0]]))
        code = main(["predict", str(fitted), str(tmp_path / "targets.csv"), str(tmp_path / "p.csv"),
                     "--t", "5"])
        assert code == 2
        assert error_of(capsys)["error_type"] == "TruncationOutOfRangeError"


class TestTune:
    def test_cylinder_default_box(self, tmp_path, fitted, capsys):
        trace = tmp_path / "trace.csv"
        assert main(["tune", str(fitted), "--out", str(trace), "--format", "json", "--update"]) == 0
        result = json.loads(capsys.readouterr().out)
        center = 3.0 / 7.0 * 1.6 * np.pi
        assert 0.7 * center * (1 - 1e-12) <= result["beta_star"][0] <= 1.3 * center * (1 + 1e-12)
        assert result["beta_star"][0] == pytest.approx(2.8, abs=0.5)
        assert list(pd.read_csv(trace).columns) == ["beta_1", "epsilon2"]
        stored = json.loads((fitted / "kernel.json").read_text())
        assert stored["lengthscales"][0] == pytest.approx(result["beta_star"][0])

    def test_trace_printed_as_csv(self, fitted, capsys):
        assert main(["tune", str(fitted), "--max-iters", "5"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "beta_1,epsilon2"
        rows = [list(map(float, line.split(","))) for line in lines[1:]]
        assert len(rows) >= 2
        assert all(b > 0 and e >= 0 for b, e in rows)

    def test_summary_row_with_trace_file(self, tmp_path, fitted, capsys):
        trace = tmp_path / "trace.csv"
        assert main(["tune", str(fitted), "--max-iters", "5", "--out", str(trace)]) == 0
        summary = capsys.readouterr().out.splitlines()
        assert summary[0] == "beta_1,epsilon2,converged"
        assert len(summary) == 2
        assert len(pd.read_csv(trace)) >= 2

    def test_incomplete_box(self, fitted, capsys):
        assert main(["tune", str(fitted), "--lower", "1"]) == 2


def test_manifest_missing_key_is_input_error(fitted, tmp_path, capsys):
    path = fitted / "manifest.json"
    manifest = json.loads(path.read_text())
    del manifest["r"]
    path.write_text(json.dumps(manifest))
    write_points(tmp_path / "targets.csv", np.array([[2.0]]))
    assert main(["predict", str(fitted), str(tmp_path / "targets.csv"), str(tmp_path / "p.csv")]) == 2
    assert error_of(capsys)["error_type"] == "MalformedInputError"


def test_sample_single_point_grid(tmp_path):
    write_points(tmp_path / "grid.csv", np.array([[0.0]]))
    assert main(["sample", str(tmp_path / "grid.csv"), str(tmp_path / "draws"), "--n", "5", "--k", "2"]) == 0
    assert sorted(p.name for p in (tmp_path / "draws").iterdir()) == ["basis_0.csv", "points.csv"]


def test_sample_is_deterministic(tmp_path):
    write_points(tmp_path / "grid.csv", np.linspace(0, 1, 4)[:, None])
    for name in ("a", "b"):
        assert main(["sample", str(tmp_path / "grid.csv"), str(tmp_path / name), "--n", "5", "--k", "2",
                     "--beta", "0.5", "--seed", "3"]) == 0
    assert (tmp_path / "a" / "basis_3.csv").read_text() == (tmp_path / "b" / "basis_3.csv").read_text()


def test_benchmark_writes_report(tmp_path, capsys):
    config = {"system": {"n": 30, "d": 1}, "k": 2, "train": {"design": "equispaced", "l": 4},
              "test": {"count": 2}, "snapshots": {"J": 30}}
    (tmp_path / "bench.json").write_text(json.dumps(config))
    out = tmp_path / "report.csv"
    assert main(["benchmark", str(tmp_path / "bench.json"), str(out), "--seed", "2"]) == 0
    assert out.read_text().splitlines()[0] == "method,theta_1,dg_to_local,rel_l2_err,predict_ms"
    assert json.loads(capsys.readouterr().out)["rows"] == 6


def test_benchmark_rejects_bad_config(tmp_path, capsys):
    (tmp_path / "bench.json").write_text("{not json")
    assert main(["benchmark", str(tmp_path / "bench.json"), str(tmp_path / "r.csv")]) == 2


def test_loocv_diagnostics(fitted, capsys):
    assert main(["loocv", str(fitted), "--beta", "2.8"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert len(payload["per_point"]) == 7
    assert len(payload["gradient"]) == 1
    assert {"total_error", "log_marginal_likelihood", "loocv_log_density"} <= set(payload)
