import numpy as np
import pytest
from scipy import stats

from pencox.simulation import (
    ChiSquareBaseline,
    ConstantBaseline,
    MetricReport,
    PiecewiseHazard,
    ScenarioSpec,
    SimTruth,
    cumulative_weights,
    evaluation_grid,
    generate,
    invert_survival,
    metrics,
    ncx2_cdf,
    ncx2_pdf,
)


def test_ncx2_against_scipy():
    x = np.linspace(0.01, 60, 300)
    np.testing.assert_allclose(ncx2_pdf(x, 14, 2), stats.ncx2.pdf(x, 14, 2), rtol=1e-9, atol=1e-15)
    np.testing.assert_allclose(ncx2_cdf(x, 14, 2), stats.ncx2.cdf(x, 14, 2), rtol=1e-9, atol=1e-15)
    assert ncx2_pdf(np.array([-1.0, 0.0]), 14, 2).tolist() == [0.0, 0.0]


def test_chi_square_cumulative_is_integral():
    base = ChiSquareBaseline()
    t = np.array([0.0, 3.0, 12.0, 25.0])
    from scipy.integrate import quad

    ref = [quad(lambda s: float(base.hazard(s)), 0, v, limit=200)[0] for v in t]
    np.testing.assert_allclose(base.cumulative(t), ref, rtol=1e-8, atol=1e-12)


def test_invert_survival_constant_examples():
    h = PiecewiseHazard(np.array([0.0]), np.array([1.0]))
    assert invert_survival(h, np.exp(-1.0)) == pytest.approx(1.0, abs=1e-12)
    h = PiecewiseHazard(np.array([0.0]), np.array([2.0]))
    assert invert_survival(h, np.exp(-1.0)) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ValueError):
        invert_survival(h, 1.0)


def test_invert_survival_piecewise_example():
    h = PiecewiseHazard(np.array([0.0, 1.0]), np.array([1.0, 3.0]))
    # one unit of mass by t=1, then rate 3
    assert invert_survival(h, np.exp(-2.5)) == pytest.approx(1.5, abs=1e-12)
    capped = PiecewiseHazard(np.array([0.0]), np.array([1.0]), horizon=2.0)
    assert invert_survival(capped, np.exp(-3.0)) == np.inf


def _ks(hazard, draws, seed):
    u = np.random.default_rng(seed).uniform(size=draws)
    sample = np.array([invert_survival(hazard, v) for v in u])
    return stats.kstest(sample, lambda t: 1.0 - np.exp(-hazard.cumulative(t))).pvalue


def test_ks_constant_hazard():
    assert _ks(PiecewiseHazard(np.array([0.0]), np.array([0.7])), 10**4, 1) > 0.01


def test_ks_chi_square_hazard():
    h = PiecewiseHazard(np.array([0.0, 4.0]), np.array([0.8, 1.3]), baseline=ChiSquareBaseline())
    assert _ks(h, 10**4, 2) > 0.01


def test_generated_event_times_follow_baseline():
    spec = ScenarioSpec(scenario_id=1, n_subjects=20000, n_clusters=1, true_beta=(0.0,) * 20, seed=3)
    _, truth = generate(spec)
    base = ChiSquareBaseline()
    for t in (2.0, 6.0, 9.0):
        empirical = np.mean(truth.event_times <= t)
        expected = 1.0 - np.exp(-base.cumulative(t))
        assert abs(empirical - expected) < 0.05 * expected


def test_scenario_structure():
    ds, truth = generate(ScenarioSpec(scenario_id=1, seed=0))
    assert ds.n_subjects == 500 and ds.n == 500 and len(ds.episodes) == 500
    assert ds.covariate_names[0] == "x1" and len(ds.covariate_names) == 20
    ds, truth = generate(ScenarioSpec(scenario_id=4, seed=0))
    assert ds.n == 50 and set(ds.cluster_sizes) == {10}
    assert truth.b.shape == (50,) and truth.sigma_b == 1.0
    assert len(ds.episodes) > ds.n_subjects
    for s, ch in zip(ds.subjects, truth.change_times):
        assert len(s.covariate_track) == 1 + np.sum(ch < s.exit_time)


def test_generate_is_seeded():
    a, _ = generate(ScenarioSpec(scenario_id=3, seed=9))
    b, _ = generate(ScenarioSpec(scenario_id=3, seed=9))
    np.testing.assert_array_equal(a.table.X, b.table.X)
    np.testing.assert_array_equal(a.table.stop, b.table.stop)


def test_censoring_fraction_band():
    fractions = [1 - np.mean([s.event for s in generate(ScenarioSpec(scenario_id=1, seed=k))[0].subjects]) for k in range(5)]
    assert 0.05 < np.mean(fractions) < 0.6


def test_scenario_validation():
    with pytest.raises(ValueError):
        ScenarioSpec(scenario_id=5)
    with pytest.raises(ValueError):
        ScenarioSpec(true_beta=(1.0,))


def test_weights_endpoints():
    grid = np.linspace(0, 5, 11)
    w = cumulative_weights(ConstantBaseline(2.0), grid)
    assert w[0] == 1.0 and w[-1] == 0.0
    np.testing.assert_allclose(w, 1 - grid / 5)


class _Perfect:
    def __init__(self, truth, beta):
        self.beta = beta
        self.baseline_hazard = truth.baseline.hazard
        self.sigma_b_sq = 1.0


def test_metrics_examples():
    beta = np.array([1.0, 1.0, 1.0, 1.0, 0, 0, 0, 0, 0, 0])
    truth = SimTruth(ConstantBaseline(0.5), beta, 1.0, np.zeros(3), None, None, [])
    grid = np.linspace(0, 4, 50)
    rep = metrics(_Perfect(truth, beta.copy()), truth, grid)
    assert rep.mse_baseline == 0.0 and rep.mse_beta == 0.0 and rep.mse_sigma_b_sq == 0.0
    assert rep.tpr == 1.0 and rep.fdr == 0.0
    chosen = np.zeros(10)
    chosen[[0, 1, 2, 3, 6]] = 0.9
    rep = metrics(_Perfect(truth, chosen), truth, grid)
    assert rep.tpr == 1.0 and rep.fdr == pytest.approx(0.2)
    assert rep.mse_beta == pytest.approx(4 * 0.01 + 0.81)


def test_metric_report_combines():
    a = MetricReport(runs=[dict(tpr=1.0, fdr=0.5, mse_sigma_b=None)])
    b = MetricReport(runs=[dict(tpr=0.5, fdr=0.0, mse_sigma_b=None)])
    both = MetricReport.combine([a, b])
    assert both.tpr == 0.75 and both.summary()["replications"] == 2
    assert np.isnan(both.mean("mse_sigma_b"))


def test_evaluation_grid():
    ds, _ = generate(ScenarioSpec(scenario_id=1, seed=0))
    grid = evaluation_grid(ds)
    last = max(s.exit_time for s in ds.subjects if s.event)
    assert grid[0] == 0.0 and grid[-1] == pytest.approx(0.9 * last) and grid.size == 100
