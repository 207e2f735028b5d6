import json

import numpy as np
import pandas as pd
import pytest
from scipy.integrate import quad

from pencox.cli import main
from pencox.data import dataset_to_frame
from pencox.simulation import ScenarioSpec, generate
from pencox.splines import SplineBasis


@pytest.fixture(scope="module")
def data_csv(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ds, _ = generate(ScenarioSpec(scenario_id=1, seed=4, n_subjects=200, n_clusters=50))
    frame = dataset_to_frame(ds).drop(columns=[f"x{k}" for k in range(7, 21)])
    path = root / "data.csv"
    frame.to_csv(path, index=False)
    return path


@pytest.fixture(scope="module")
def fitted(data_csv, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit")
    assert main(["fit", str(data_csv), "-o", str(out), "--weights", "unit"]) == 0
    return out


def test_fit_outputs(fitted):
    summary = json.loads((fitted / "fit.json").read_text())
    assert len(summary["coefficients"]) == 6 and summary["selected_out"] == []
    assert summary["converged"] is True
    base = pd.read_csv(fitted / "baseline.tsv", sep="\t")
    assert list(base.columns) == ["t", "baseline_hazard"] and len(base) == 200
    assert (base.baseline_hazard > 0).all()
    assert list(pd.read_csv(fitted / "tv_effects.tsv", sep="\t").columns) == ["t"]


def test_fit_large_xi_selects_nothing(data_csv, tmp_path):
    assert main(["fit", str(data_csv), "-o", str(tmp_path), "--xi", "1e6"]) == 0
    summary = json.loads((tmp_path / "fit.json").read_text())
    assert summary["selected"] == []


def test_fit_with_tv_and_frailty(data_csv, tmp_path):
    argv = ["fit", str(data_csv), "-o", str(tmp_path), "--pen", "x1+x2", "--unpen", "x3", "--tv", "x4"]
    assert main(argv + ["--frailty", "cluster", "--xi", "0.5", "--weights", "unit"]) in (0, 3)
    tv = pd.read_csv(tmp_path / "tv_effects.tsv", sep="\t")
    assert list(tv.columns) == ["t", "x4"]
    summary = json.loads((tmp_path / "fit.json").read_text())
    assert summary["frailty_column"] == "cluster"


def test_exit_codes(data_csv, tmp_path):
    assert main(["fit", str(tmp_path / "absent.csv"), "-o", str(tmp_path)]) == 1
    broken = tmp_path / "broken.csv"
    pd.read_csv(data_csv).drop(columns=["event"]).to_csv(broken, index=False)
    assert main(["fit", str(broken), "-o", str(tmp_path)]) == 2
    assert main(["fit", str(data_csv), "-o", str(tmp_path), "--pen", "nope"]) == 2
    assert main(["fit", str(data_csv), "-o", str(tmp_path), "--max-outer", "1", "--tol-grad", "1e-14"]) == 3


def test_path_output(data_csv, tmp_path):
    argv = ["path", str(data_csv), "-o", str(tmp_path), "--grid-length", "5", "--grid-ratio", "0.01"]
    assert main(argv) == 0
    paths = pd.read_csv(tmp_path / "paths.tsv", sep="\t")
    assert list(paths.columns) == ["xi", "group", "term", "coefficient"]
    top = paths[paths.xi == paths.xi.max()]
    assert len(top) == 6 and (top.coefficient == 0).all()


def test_cv_output_deterministic(data_csv, tmp_path):
    runs = []
    for k in range(2):
        out = tmp_path / str(k)
        assert main(["cv", str(data_csv), "-o", str(out), "--grid", "2+0.5+0.1", "--K", "3", "--seed", "5"]) == 0
        runs.append(out)
    assert (runs[0] / "cv.tsv").read_bytes() == (runs[1] / "cv.tsv").read_bytes()
    cv = json.loads((runs[0] / "cv.json").read_text())
    assert cv["xi_1se"] >= cv["xi_opt"]
    assert list(pd.read_csv(runs[0] / "cv.tsv", sep="\t").columns) == ["xi", "cv_error", "cv_se"]


def test_simulate_output(tmp_path):
    argv = ["simulate", "--scenario", "1", "--replications", "2", "--n-subjects", "200", "--xi", "1.0"]
    assert main(argv + ["-o", str(tmp_path), "--export-data"]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert "mean_tpr" in summary and "mean_fdr" in summary and summary["replications"] == 2
    table = pd.read_csv(tmp_path / "metrics.tsv", sep="\t")
    assert list(table.columns) == ["replication", "seed", "estimator", "metric", "value"]
    assert set(table.estimator) == {"full", "breslow"}
    assert (tmp_path / "data.csv").exists()


def test_predict_zero_covariates_is_baseline(fitted, tmp_path):
    new = pd.DataFrame({"id": ["a", "b"], **{f"x{k}": [0.0, 0.5] for k in range(1, 7)}})
    new.to_csv(tmp_path / "new.csv", index=False)
    assert main(["predict", str(fitted / "fit.json"), str(tmp_path / "new.csv"), "-o", str(tmp_path)]) == 0
    surv = pd.read_csv(tmp_path / "survival.tsv", sep="\t")
    assert list(surv.columns) == ["id", "t", "survival"]
    for _, g in surv.groupby("id"):
        assert g.survival.iloc[0] == 1.0 and np.all(np.diff(g.survival) <= 0)
    model = json.loads((fitted / "fit.json").read_text())
    basis = SplineBasis(model["M"], model["degree"], np.asarray(model["knots"]))
    alpha = np.asarray(model["alpha"])[0]
    zero = surv[surv.id == "a"]
    for t, s in zip(zero.t.iloc[::40], zero.survival.iloc[::40]):
        lam = quad(lambda u: float(np.exp(basis.design([u]) @ alpha)[0]), 0, t, limit=200)[0] if t > 0 else 0.0
        assert s == pytest.approx(np.exp(-lam), rel=1e-6)


def test_predict_unknown_column(fitted, tmp_path):
    pd.DataFrame({"id": [1], "x1": [0.0], "mystery": [1.0]}).to_csv(tmp_path / "bad.csv", index=False)
    assert main(["predict", str(fitted / "fit.json"), str(tmp_path / "bad.csv"), "-o", str(tmp_path)]) == 2
