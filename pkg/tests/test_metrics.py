import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from remediate.classifier import BoostConfig, sigmoid
from remediate.engine import ModelConfig
from remediate.metrics import (
    MetricError,
    auroc,
    confusion_at_threshold,
    holdout_split,
    learning_curve,
    prevalence_interval,
    reliability_curve,
    roc_points,
    temporal_learning_curve,
    trapezoid_area,
)

SMALL = ModelConfig(boost=BoostConfig(n_rounds=40, learning_rate=0.2), spatial_lambda=0.0)


def pairwise_auroc(s, y):
    pos = [a for a, t in zip(s, y) if t == 1]
    neg = [b for b, t in zip(s, y) if t == 0]
    total = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a, b in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def strong_signal(n, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 3))
    p = sigmoid(2.5 * X[:, 0] - 2.0 * X[:, 1] + X[:, 2])
    return X, (rng.random(n) < p).astype(int)


def test_auroc_examples():
    assert auroc([0.9, 0.1], [1, 0]) == 1.0
    assert auroc([0.1, 0.9], [1, 0]) == 0.0
    assert auroc([0.8, 0.8, 0.2], [1, 0, 0]) == 0.75


def test_auroc_single_class_is_absent():
    assert auroc([0.2, 0.4], [1, 1]) is None
    with pytest.raises(MetricError):
        roc_points([0.2, 0.4], [0, 0])


def test_auroc_small_pairwise():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 30))
        s = rng.integers(0, 5, size=n) / 4
        y = rng.integers(0, 2, size=n)
        if 0 < y.sum() < n:
            assert abs(auroc(s, y) - pairwise_auroc(s, y)) <= 1e-12


def test_auroc_invariances():
    rng = np.random.default_rng(1)
    s = rng.random(100)
    y = rng.integers(0, 2, size=100)
    a = auroc(s, y)
    assert auroc(np.exp(5 * s) - 3, y) == pytest.approx(a, abs=1e-15)
    assert auroc(s, 1 - y) == pytest.approx(1 - a, abs=1e-12)


def test_roc_perfect_passes_through_corner():
    curve = roc_points([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0])
    pts = list(zip(curve.x, curve.y))
    assert (0.0, 1.0) in pts
    assert pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)


def test_roc_constant_scores_is_diagonal():
    curve = roc_points([0.5] * 6, [1, 0, 1, 0, 0, 1])
    assert list(zip(curve.x, curve.y)) == [(0.0, 0.0), (1.0, 1.0)]


def test_roc_area_matches_auroc_fuzzed():
    rng = np.random.default_rng(2)
    done = 0
    while done < 1000:
        n = int(rng.integers(2, 120))
        s = np.round(rng.random(n), int(rng.integers(1, 4)))
        y = rng.integers(0, 2, size=n)
        if not 0 < y.sum() < n:
            continue
        curve = roc_points(s, y)
        assert np.all(np.diff(curve.x) >= 0) and np.all(np.diff(curve.y) >= 0)
        assert abs(trapezoid_area(curve) - auroc(s, y)) <= 1e-12
        done += 1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=2, max_size=40))
def test_flip_property(pairs):
    s = np.array([p[0] for p in pairs]) / 6.0
    y = np.array([p[1] for p in pairs])
    if 0 < y.sum() < len(y):
        assert auroc(s, y) + auroc(s, 1 - y) == pytest.approx(1.0, abs=1e-12)


def test_confusion_threshold_extremes():
    s = [0.1, 0.4, 0.9]
    y = [0, 1, 1]
    allpos = confusion_at_threshold(s, y, threshold=0.0)
    assert allpos.tn == 0 and allpos.fn == 0
    allneg = confusion_at_threshold(s, y, threshold=1.0 + 1e-9)
    assert allneg.tp == 0 and allneg.fp == 0


def test_confusion_top_fraction():
    s = [0.9, 0.8, 0.7, 0.2, 0.1]
    y = [1, 0, 1, 1, 0]
    c = confusion_at_threshold(s, y, top_fraction=0.6)
    assert (c.tp, c.fp, c.tn, c.fn) == (2, 1, 1, 1)
    assert c.accuracy == 0.6 and c.fpr == 0.5 and c.fnr == pytest.approx(1 / 3)
    with pytest.raises(MetricError):
        confusion_at_threshold(s, y)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=50), st.floats(0, 1))
def test_confusion_counts_sum(pairs, q):
    s = [p[0] for p in pairs]
    y = [p[1] for p in pairs]
    assert confusion_at_threshold(s, y, threshold=q).n == len(s)
    assert confusion_at_threshold(s, y, top_fraction=q).n == len(s)


def test_reliability_constant_predictor():
    y = np.array([1] * 7 + [0] * 3)
    curve = reliability_curve(np.full(10, 0.7), y, 10)
    assert len(curve.x) == 1
    assert curve.x[0] == pytest.approx(0.7) and curve.y[0] == pytest.approx(0.7)


def test_reliability_hard_predictor():
    curve = reliability_curve([0.0, 1.0, 1.0, 0.0], [0, 1, 1, 0], 10)
    assert list(zip(curve.x, curve.y)) == [(0.0, 0.0), (1.0, 1.0)]


def test_reliability_calibrated_scores():
    rng = np.random.default_rng(3)
    s = rng.random(10_000)
    y = (rng.random(10_000) < s).astype(int)
    curve = reliability_curve(s, y, 10)
    assert np.all(np.diff(curve.x) > 0)
    assert np.mean(np.abs(curve.x - curve.y)) < 0.05


def test_holdout_split_partitions():
    tr, te = holdout_split(100, 0.25, 0)
    assert len(te) == 25 and not set(tr) & set(te) and len(tr) + len(te) == 100


def test_learning_curve_full_fraction_equals_single_split():
    from remediate.engine import fit_statistical_model
    X, y = strong_signal(600, 4)
    curve = learning_curve(X, y, SMALL, [1.0], replications=1, seed=5)
    tr, te = holdout_split(len(y), 0.25, 5)
    model = fit_statistical_model(X[tr], y[tr].astype(float), np.ones(len(tr)), ["_"] * len(tr), SMALL,
                                  ["x0", "x1", "x2"])
    assert curve.y[0] == auroc(model.score(X[te], ["_"] * len(te)), y[te])
    assert curve.x[0] == len(tr)


def test_learning_curve_deterministic():
    X, y = strong_signal(500, 6)
    a = learning_curve(X, y, SMALL, [0.2, 0.5, 1.0], replications=1, seed=1)
    b = learning_curve(X, y, SMALL, [0.2, 0.5, 1.0], replications=1, seed=1)
    assert a.rows() == b.rows()


def test_learning_curve_skips_tiny_fractions():
    X, y = strong_signal(200, 7)
    curve = learning_curve(X, y, SMALL, [0.005, 0.5], replications=2, seed=0)
    assert curve.meta["skipped_fractions"] == [0.005]
    assert len(curve.x) == 1


def test_learning_curve_rises_on_strong_signal():
    fractions = [0.02, 0.04, 0.06, 0.1, 0.15, 0.25, 0.4, 0.6, 0.8, 1.0]
    means = []
    for seed in range(25):
        X, y = strong_signal(1000, 100 + seed)
        means.append(learning_curve(X, y, SMALL, fractions, replications=1, seed=seed).y)
    curve = np.mean(means, axis=0)
    inversions = int(np.sum(np.diff(curve) < 0))
    assert inversions <= 1


def test_temporal_single_period_is_holdout():
    from remediate.engine import fit_statistical_model
    X, y = strong_signal(400, 8)
    epochs = np.r_[np.zeros(300, dtype=int), np.ones(100, dtype=int)]
    curve = temporal_learning_curve(X, y, epochs, SMALL)
    # one boundary with a future set; the final boundary has none and is dropped
    assert len(curve.x) == 1 and curve.meta["period_end"] == [1]
    model = fit_statistical_model(X[:300], y[:300].astype(float), np.ones(300), ["_"] * 300, SMALL,
                                  ["x0", "x1", "x2"])
    assert curve.y[0] == auroc(model.score(X[300:], ["_"] * 100), y[300:])


def test_temporal_single_class_future_is_absent():
    X, y = strong_signal(300, 9)
    y = y.copy()
    y[250:] = 1
    epochs = np.r_[np.zeros(250, dtype=int), np.ones(50, dtype=int)]
    curve = temporal_learning_curve(X, y, epochs, SMALL)
    assert len(curve.x) == 0 and curve.meta["absent"] == [1]


def test_temporal_random_order_tracks_learning_curve():
    # with arrival order random, training on the first periods is a random subsample
    diffs = []
    for seed in range(5):
        X, y = strong_signal(2000, 200 + seed)
        epochs = np.random.default_rng(seed).permutation(np.repeat(np.arange(5), 400))
        temporal = temporal_learning_curve(X, y, epochs, SMALL)
        lc = learning_curve(X, y, SMALL, [0.25, 0.5, 0.75, 1.0], replications=1, seed=seed, test_fraction=0.2)
        np.testing.assert_array_equal(temporal.x, lc.x)
        diffs.append(temporal.y - lc.y)
    assert np.all(np.abs(np.mean(diffs, axis=0)) < 0.02)


def test_prevalence_interval_all_labeled():
    X, y = strong_signal(100, 10)
    iv = prevalence_interval(X, y, SMALL, n_bootstrap=5)
    assert iv.low == iv.point == iv.high == y.sum()


def test_prevalence_interval_errors():
    X, y = strong_signal(50, 11)
    with pytest.raises(MetricError):
        prevalence_interval(X, y, SMALL, n_bootstrap=1)
    with pytest.raises(MetricError):
        prevalence_interval(X, np.full(50, -1), SMALL, n_bootstrap=5)


def test_prevalence_interval_deterministic_and_ordered():
    X, y = strong_signal(300, 12)
    lab = y.copy()
    lab[150:] = -1
    a = prevalence_interval(X, lab, SMALL, n_bootstrap=20, seed=3)
    b = prevalence_interval(X, lab, SMALL, n_bootstrap=20, seed=3)
    assert (a.low, a.point, a.high) == (b.low, b.point, b.high)
    assert a.low <= a.point <= a.high
    precincts = np.where(np.arange(300) % 2 == 0, "A", "B")
    c = prevalence_interval(X, lab, SMALL, n_bootstrap=20, seed=3, precincts=list(precincts), stratified=True)
    assert c.low <= c.point <= c.high


def test_prevalence_interval_coverage():
    logistic = ModelConfig(kind="logistic", l1_strength=0.0, spatial_lambda=0.0)
    covered = 0
    for rep in range(100):
        X, y = strong_signal(400, 1000 + rep)
        lab = y.copy()
        lab[np.random.default_rng(rep).permutation(400)[:200]] = -1
        iv = prevalence_interval(X, lab, logistic, n_bootstrap=60, confidence=0.95, seed=rep)
        covered += iv.low <= y.sum() <= iv.high
    assert covered >= 90
