import csv
import json

import numpy as np
import pytest

from stgp import cli
from stgp.errors import NumericalError
from test_data import write_fixture

TRAIN = ["--iterations", "50", "--inducing", "10", "--components", "2", "--hidden", "8,8",
         "--batch-size", "1000", "--log-every", "1"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("synth", "--counties", 8, "--weeks", 10, "--latent-sd", 1.0, "--seed", 2,
               "--out", d / "panel") == 0
    assert run("train", "--panel", d / "panel", "--model", d / "model.json", "--trace",
               d / "trace.csv", "--holdout", 3, "--seed", 2, *TRAIN) == 0
    return d


# ---------------------------------------------------------------------------
# ingest and synth
# ---------------------------------------------------------------------------


def test_ingest_fixture(tmp_path):
    write_fixture(tmp_path)
    code = run("ingest", "--cases", tmp_path / "cases.csv", "--hotspots", tmp_path / "hot.csv",
               "--centroids", tmp_path / "centroids.csv", "--adjacency", tmp_path / "adj.csv",
               "--mobility", tmp_path / "mob.csv", "--out", tmp_path / "panel")
    assert code == 0
    rep = json.loads((tmp_path / "panel" / "ingest_report.json").read_text())
    assert (rep["counties"], rep["weeks"]) == (3, 4)
    rows = read_csv(tmp_path / "panel" / "panel.csv")
    assert len(rows) == 1 + 12
    assert read_csv(tmp_path / "panel" / "adjacency.csv") == [["fips_a", "fips_b"],
                                                             ["01001", "01003"]]


def test_ingest_without_mobility_counts_warnings(tmp_path):
    write_fixture(tmp_path, with_mobility=False)
    assert run("ingest", "--cases", tmp_path / "cases.csv", "--hotspots", tmp_path / "hot.csv",
               "--centroids", tmp_path / "centroids.csv", "--out", tmp_path / "p") == 0
    rep = json.loads((tmp_path / "p" / "ingest_report.json").read_text())
    assert rep["warning_count"] > 0 and rep["imputed_mobility"] == 3 * 4 * 6


def test_malformed_header_exit_code(tmp_path, capsys):
    write_fixture(tmp_path, header="when,fips,cases,deaths")
    code = run("ingest", "--cases", tmp_path / "cases.csv", "--hotspots", tmp_path / "hot.csv",
               "--centroids", tmp_path / "centroids.csv", "--out", tmp_path / "p")
    assert code == 2
    assert "line 1" in capsys.readouterr().err
    assert not (tmp_path / "p" / "panel.csv").exists()


def test_synth_outputs(workdir):
    lat = read_csv(workdir / "panel" / "latent.csv")
    assert lat[0] == ["fips", "week", "f"] and len(lat) == 1 + 80


# ---------------------------------------------------------------------------
# train and predict
# ---------------------------------------------------------------------------


def test_train_writes_model_and_trace(workdir):
    lines = (workdir / "trace.csv").read_text().splitlines()
    assert lines[0].startswith("# delta=1e-05 seed=2 iterations=50")
    assert lines[1] == "iteration,elbo_h,elbo_y,combined" and len(lines) == 2 + 50
    model = json.loads((workdir / "model.json").read_text())
    assert model["format"] == "stgp-model" and model["train_weeks"] == 7


def test_delta_flag_overrides_config(workdir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"train": {"delta": 0.5, "iterations": 3}}))
    assert run("train", "--config", cfg, "--panel", workdir / "panel", "--model",
               tmp_path / "m.json", "--trace", tmp_path / "t.csv", "--inducing", 10,
               "--hidden", "8,8", "--components", 2) == 0
    assert (tmp_path / "t.csv").read_text().startswith("# delta=0.5 seed=0 iterations=3")
    assert run("train", "--config", cfg, "--panel", workdir / "panel", "--model",
               tmp_path / "m.json", "--trace", tmp_path / "t.csv", "--inducing", 10,
               "--hidden", "8,8", "--components", 2, "--delta", 0.25) == 0
    assert (tmp_path / "t.csv").read_text().startswith("# delta=0.25 seed=0 iterations=3")


def test_train_identical_seeds_identical_bytes(workdir, tmp_path):
    assert run("train", "--panel", workdir / "panel", "--model", tmp_path / "again.json",
               "--holdout", 3, "--seed", 2, *TRAIN) == 0
    assert (tmp_path / "again.json").read_bytes() == (workdir / "model.json").read_bytes()


def test_global_seed_before_command(workdir, tmp_path):
    assert run("--seed", 2, "train", "--panel", workdir / "panel", "--model",
               tmp_path / "g.json", "--holdout", 3, *TRAIN) == 0
    assert (tmp_path / "g.json").read_bytes() == (workdir / "model.json").read_bytes()


def test_predict(workdir, tmp_path):
    out = tmp_path / "pred.csv"
    assert run("predict", "--panel", workdir / "panel", "--model", workdir / "model.json",
               "--weeks", "9,10", "--out", out) == 0
    rows = read_csv(out)
    assert rows[0] == ["week", "fips", "prob", "case_mean", "case_lower", "case_upper"]
    assert len(rows) == 1 + 16
    vals = np.array([[float(v) for v in r[2:]] for r in rows[1:]])
    assert np.all((vals[:, 0] >= 0) & (vals[:, 0] <= 1))
    assert np.all(vals[:, 2] <= vals[:, 1]) and np.all(vals[:, 1] <= vals[:, 3])


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def test_evaluate_oracle_scores_one(workdir, tmp_path):
    from stgp.data import read_panel
    panel = read_panel(workdir / "panel" / "panel.csv")
    assert panel.hotspots[:, :7].any(axis=1).all()  # every county calibrates
    assert run("evaluate", "--panel", workdir / "panel", "--oracle", "--holdout", 3,
               "--out", tmp_path / "ev") == 0
    s = json.loads((tmp_path / "ev" / "summary.json").read_text())
    assert s["f1"] == 1.0 and s["model"] == "oracle"


def test_evaluate_model_with_baselines(workdir, tmp_path):
    assert run("evaluate", "--panel", workdir / "panel", "--model", workdir / "model.json",
               "--baseline", "all", "--holdout", 3, "--out", tmp_path / "ev") == 0
    s = json.loads((tmp_path / "ev" / "summary.json").read_text())
    assert {"precision", "recall", "f1", "rmse", "coverage"} <= set(s)
    assert set(s["baselines"]) == {"perceptron", "logistic", "knn"}
    rows = read_csv(tmp_path / "ev" / "report.csv")
    assert rows[0] == ["week", "fips", "prob", "threshold", "alarm", "truth", "model"]
    assert {r[-1] for r in rows[1:]} == {"stgp", "perceptron", "logistic", "knn"}
    assert len(rows) == 1 + 4 * 3 * 8


def test_evaluate_usage_errors(workdir, tmp_path):
    assert run("evaluate", "--panel", workdir / "panel", "--out", tmp_path / "e") == 1
    assert run("evaluate", "--panel", workdir / "panel", "--baseline", "svm",
               "--out", tmp_path / "e") == 1
    assert run("evaluate", "--panel", workdir / "panel", "--oracle", "--holdout", 10,
               "--out", tmp_path / "e") == 1


# ---------------------------------------------------------------------------
# sweep and export
# ---------------------------------------------------------------------------


def test_sweep_delta(workdir, tmp_path):
    out = tmp_path / "sweep.csv"
    assert run("sweep-delta", "--panel", workdir / "panel", "--deltas", "0,1e-5,0",
               "--holdout", 2, "--out", out, "--iterations", 10, *TRAIN[2:]) == 0
    rows = read_csv(out)
    assert rows[0] == ["delta", "f1", "rmse"]
    assert [float(r[0]) for r in rows[1:]] == [0.0, 1e-5]


def test_sweep_empty_list(workdir, tmp_path):
    assert run("sweep-delta", "--panel", workdir / "panel", "--deltas", "",
               "--out", tmp_path / "s.csv") == 1


def test_export_kernel(workdir, tmp_path):
    assert run("export-kernel", "--model", workdir / "model.json", "--center=-87.5,35",
               "--grid", 10, "--out", tmp_path / "k") == 0
    assert len(read_csv(tmp_path / "k" / "kernel.csv")) == 1 + 100
    comp = read_csv(tmp_path / "k" / "components.csv")
    assert comp[0] == ["component", "lon", "lat", "psi_x", "psi_y", "w"]
    assert sorted({r[0] for r in comp[1:]}) == ["0", "1"] and len(comp) == 1 + 200
    w = np.array([float(r[5]) for r in comp[1:]]).reshape(2, 100)
    assert np.allclose(w.sum(axis=0), 1.0)


def test_export_fresh_kernel_peaks_at_center(workdir, tmp_path):
    assert run("train", "--panel", workdir / "panel", "--model", tmp_path / "fresh.json",
               "--iterations", 0, "--inducing", 10, "--hidden", "8,8") == 0
    assert run("export-kernel", "--model", tmp_path / "fresh.json", "--center=-87.5,35",
               "--grid", 11, "--extent=-92.5,-82.5,30,40", "--out", tmp_path / "k") == 0
    rows = read_csv(tmp_path / "k" / "kernel.csv")[1:]
    vals = np.array([float(r[2]) for r in rows])
    peak = rows[int(np.argmax(vals))]
    assert (float(peak[0]), float(peak[1])) == pytest.approx((-87.5, 35.0))


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------


def test_usage_exit_codes(tmp_path, capsys):
    assert run() == 1
    assert run("train", "--bogus") == 1
    assert run("synth", "--out", tmp_path / "s", "--threads", 0) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    assert run("synth", "--out", tmp_path / "s", "--config", bad) == 1
    assert "error" in capsys.readouterr().err


def test_data_exit_codes(workdir, tmp_path):
    assert run("predict", "--panel", workdir / "panel", "--model", tmp_path / "none.json",
               "--weeks", 9, "--out", tmp_path / "p.csv") == 2
    broken = tmp_path / "broken.json"
    broken.write_text((workdir / "model.json").read_text()[:100])
    assert run("predict", "--panel", workdir / "panel", "--model", broken,
               "--weeks", 9, "--out", tmp_path / "p.csv") == 2
    assert run("train", "--panel", tmp_path / "nowhere", "--model", tmp_path / "m.json") == 2
    assert not (tmp_path / "p.csv").exists()


def test_numerical_exit_code(workdir, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NumericalError("Cholesky failed")

    monkeypatch.setattr(cli, "train", boom)
    assert run("train", "--panel", workdir / "panel", "--model", tmp_path / "m.json") == 3
    assert not (tmp_path / "m.json").exists()


def test_threads_flag(workdir, tmp_path):
    assert run("--threads", 1, "export-kernel", "--model", workdir / "model.json",
               "--center=-87.5,35", "--grid", 3, "--out", tmp_path / "k") == 0
