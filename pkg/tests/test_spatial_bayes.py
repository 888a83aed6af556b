import logging
import math

import mpmath
import numpy as np
import pytest

from remediate.spatial_bayes import (
    MAX_CONCENTRATION,
    PoolingError,
    PoolingModel,
    PrecinctStats,
    RecalibrationConfig,
    fit_hyperparameters,
    precinct_posterior_mean,
    precinct_stats,
    recalibrate,
)


def test_moment_oracle_two_precincts():
    model = fit_hyperparameters([PrecinctStats("a", 1000, 200), PrecinctStats("b", 1000, 800)])
    # m = 0.5, s2 = 0.09, sampling noise = 0.25 / 1000, tau2 = 0.08975
    conc = 0.25 / 0.08975 - 1.0
    assert conc == pytest.approx(1.7855153203342617, rel=1e-14)
    assert model.alpha == pytest.approx(0.5 * conc, rel=1e-12)
    assert model.beta == pytest.approx(0.5 * conc, rel=1e-12)
    assert model.city_rate == pytest.approx(0.5)


def test_moment_oracle_uneven_sizes():
    stats = [PrecinctStats("a", 10, 1), PrecinctStats("b", 40, 30), PrecinctStats("c", 25, 20)]
    rates = np.array([0.1, 0.75, 0.8])
    m = rates.mean()
    tau2 = rates.var() - m * (1 - m) * np.mean([1 / 10, 1 / 40, 1 / 25])
    conc = m * (1 - m) / tau2 - 1
    model = fit_hyperparameters(stats)
    assert model.alpha == pytest.approx(m * conc, rel=1e-12)
    assert model.beta == pytest.approx((1 - m) * conc, rel=1e-12)


def test_no_overdispersion_hits_cap():
    stats = [PrecinctStats(str(i), 5000, 3500) for i in range(6)]
    model = fit_hyperparameters(stats)
    assert model.concentration == pytest.approx(MAX_CONCENTRATION)
    for s in stats:
        assert model.posterior_mean(s.precinct) == pytest.approx(0.7, abs=1e-6)


def test_degenerate_single_home_precincts():
    # rates 1 and 0 with n = 1: s2 = 0.25 equals the sampling noise exactly
    model = fit_hyperparameters([PrecinctStats("h", 1, 1), PrecinctStats("s", 1, 0)])
    assert model.alpha > 0 and model.beta > 0
    assert model.alpha == pytest.approx(0.5 * MAX_CONCENTRATION)
    assert model.beta == pytest.approx(0.5 * MAX_CONCENTRATION)


def test_fit_errors():
    with pytest.raises(PoolingError):
        fit_hyperparameters([PrecinctStats("a", 0, 0), PrecinctStats("b", 0, 0)])
    with pytest.raises(PoolingError):
        fit_hyperparameters([PrecinctStats("a", 10, 3)])
    with pytest.raises(PoolingError):
        PrecinctStats("a", 3, 4)


def test_all_hazardous_precincts_stay_valid():
    model = fit_hyperparameters([PrecinctStats("a", 4, 4), PrecinctStats("b", 9, 9)])
    assert model.alpha > 0 and model.beta > 0
    assert 0 < model.posterior_mean("a") < 1


def test_posterior_mean_closed_form():
    model = PoolingModel(2.0, 2.0)
    assert precinct_posterior_mean(model, PrecinctStats("x", 10, 8)) == pytest.approx(10 / 14, abs=1e-15)
    assert precinct_posterior_mean(model, PrecinctStats("x", 0, 0)) == 0.5


def test_unknown_precinct_falls_back_to_prior():
    model = PoolingModel(3.0, 1.0, {"a": PrecinctStats("a", 2, 0)})
    assert model.posterior_mean("zzz") == 0.75


def test_posterior_mean_monotone_in_k():
    model = PoolingModel(1.5, 4.0)
    means = [precinct_posterior_mean(model, PrecinctStats("x", n, n)) for n in range(0, 200, 7)]
    assert all(b > a for a, b in zip(means, means[1:]))
    assert means[-1] < 1.0


def _integrated_mean(a, b, n, k):
    f = lambda t: t ** (a + k - 1) * (1 - t) ** (b + n - k - 1)
    return mpmath.quad(lambda t: t * f(t), [0, 0.5, 1]) / mpmath.quad(f, [0, 0.5, 1])


def test_posterior_matches_numerical_integration():
    mpmath.mp.dps = 30
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = (float(v) for v in rng.uniform(1.0, 20.0, size=2))
        n = int(rng.integers(0, 60))
        k = int(rng.integers(0, n + 1))
        got = precinct_posterior_mean(PoolingModel(a, b), PrecinctStats("x", n, k))
        assert abs(got - float(_integrated_mean(a, b, n, k))) < 1e-9


def test_shrinkage_falls_with_more_data():
    model = PoolingModel(3.0, 5.0)
    for rate in (0.0, 0.2, 0.5, 0.9, 1.0):
        gaps = []
        for n in (10, 20, 40, 80, 160, 320):
            k = round(rate * n)
            gaps.append(abs(precinct_posterior_mean(model, PrecinctStats("x", n, k)) - k / n))
        assert all(b <= a + 1e-15 for a, b in zip(gaps, gaps[1:]))


def test_precinct_stats_counts():
    stats = precinct_stats(["b", "a", "b", "b"], [1, 0, 0, 1])
    assert stats == [PrecinctStats("a", 1, 0), PrecinctStats("b", 3, 2)]


def test_json_round_trip():
    model = fit_hyperparameters(precinct_stats(list("aabbbc"), [1, 0, 1, 1, 0, 1]))
    doc = model.to_json(0.5)
    assert doc["lambda"] == 0.5 and doc["precincts"]["b"] == [3, 2]
    again = PoolingModel.from_json(doc)
    assert again.alpha == model.alpha and again.posterior_means() == model.posterior_means()


# ---------------------------------------------------------------------------
# recalibration
# ---------------------------------------------------------------------------

def test_recalibrate_lambda_zero_is_identity():
    p = np.random.default_rng(1).uniform(0.01, 0.99, size=100)
    np.testing.assert_array_equal(recalibrate(p, 0.9, 0.3, RecalibrationConfig(0.0)), p)


def test_recalibrate_closed_form():
    rbar = 0.4
    r = 1 / (1 + math.exp(-(math.log(rbar / (1 - rbar)) + 1.0)))
    assert recalibrate(0.5, r, rbar, RecalibrationConfig(1.0)) == pytest.approx(0.7310585786300049, abs=1e-12)


def test_recalibrate_zero_shift_is_identity():
    p = np.array([0.123, 0.5, 0.999])
    for lam in (0.3, 1.0, 7.0):
        np.testing.assert_array_equal(recalibrate(p, 0.6, 0.6, RecalibrationConfig(lam)), p)


def test_recalibrate_monotone_in_p_and_r():
    p = np.linspace(0.01, 0.99, 50)
    out = recalibrate(p, 0.7, 0.5, RecalibrationConfig(0.5))
    assert np.all(np.diff(out) > 0)
    r = np.linspace(0.05, 0.95, 50)
    out_r = recalibrate(np.full(50, 0.4), r, 0.5, RecalibrationConfig(0.5))
    assert np.all(np.diff(out_r) > 0)


def test_recalibrate_keeps_within_precinct_order():
    p = np.random.default_rng(2).uniform(0.01, 0.99, size=200)
    out = recalibrate(p, 0.85, 0.6, RecalibrationConfig(0.8))
    np.testing.assert_array_equal(np.argsort(out, kind="stable"), np.argsort(p, kind="stable"))


def test_recalibrate_clamps_and_flags(caplog):
    with caplog.at_level(logging.WARNING, logger="remediate.spatial_bayes"):
        out = recalibrate(np.array([0.0, 1.0]), 0.5, 0.4, RecalibrationConfig(1.0))
    assert np.all((out > 0) & (out < 1))
    assert "clamped" in caplog.text


def test_lambda_must_be_non_negative():
    with pytest.raises(PoolingError):
        RecalibrationConfig(-0.1)
    with pytest.raises(PoolingError):
        RecalibrationConfig(float("inf"))
