"""Classifier and policy evaluation: ROC analysis, calibration, learning curves
and bootstrap intervals for the number of homes needing replacement."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .engine import ModelConfig, fit_statistical_model


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class CurveSeries:
    name: str
    x: np.ndarray
    y: np.ndarray
    spread: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for j in range(len(self.x)):
            row = {"x": float(self.x[j]), "y": float(self.y[j])}
            if self.spread is not None:
                row["spread"] = float(self.spread[j])
            out.append(row)
        return out


def _scored(scores, labels):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=int)
    if s.shape != y.shape or s.ndim != 1:
        raise MetricError("scores and labels must be aligned 1-D arrays")
    if len(s) == 0:
        raise MetricError("empty scored set")
    return s, y


def auroc(scores, labels) -> float | None:
    """Mann-Whitney AUROC with half credit for tied scores; None if one class is absent."""
    s, y = _scored(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_points(scores, labels) -> CurveSeries:
    """(FPR, TPR) at every distinct threshold, from (0, 0) to (1, 1)."""
    s, y = _scored(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC needs both classes")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    return CurveSeries("roc", fpr, tpr, meta={"n_pos": n_pos, "n_neg": n_neg})


def trapezoid_area(curve: CurveSeries) -> float:
    return float(np.sum(np.diff(curve.x) * (curve.y[1:] + curve.y[:-1]) / 2.0))


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.n

    @property
    def fpr(self) -> float | None:
        neg = self.fp + self.tn
        return self.fp / neg if neg else None

    @property
    def fnr(self) -> float | None:
        pos = self.tp + self.fn
        return self.fn / pos if pos else None


def confusion_at_threshold(scores, labels, threshold: float | None = None,
                           top_fraction: float | None = None) -> Confusion:
    """Counts with positives at score >= threshold, or the top ``top_fraction`` of scores.

    In top-fraction mode the ceil(q * n) highest scores are positive; ties at
    the boundary are broken by original position.
    """
    s, y = _scored(scores, labels)
    if (threshold is None) == (top_fraction is None):
        raise MetricError("give exactly one of threshold or top_fraction")
    if threshold is not None:
        pred = s >= threshold
    else:
        if not 0.0 <= top_fraction <= 1.0:
            raise MetricError("top_fraction must lie in [0, 1]")
        k = int(np.ceil(top_fraction * len(s)))
        pred = np.zeros(len(s), dtype=bool)
        pred[np.argsort(-s, kind="stable")[:k]] = True
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    tn = int(np.sum(~pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    return Confusion(tp, fp, tn, fn)


def reliability_curve(scores, labels, n_bins: int = 10) -> CurveSeries:
    """Mean predicted probability vs observed rate in equal-width bins; empty bins dropped."""
    s, y = _scored(scores, labels)
    if n_bins < 1:
        raise MetricError("n_bins must be at least 1")
    b = np.minimum((s * n_bins).astype(int), n_bins - 1)
    counts = np.bincount(b, minlength=n_bins)
    mean_pred = np.bincount(b, weights=s, minlength=n_bins)
    rate = np.bincount(b, weights=y, minlength=n_bins)
    keep = counts > 0
    return CurveSeries("reliability", mean_pred[keep] / counts[keep], rate[keep] / counts[keep],
                       meta={"counts": counts[keep].tolist(), "n_bins": n_bins})


# ---------------------------------------------------------------------------
# learning curves
# ---------------------------------------------------------------------------

def _fit_and_score(X_tr, y_tr, X_te, cfg: ModelConfig, names, precincts_tr=None, precincts_te=None):
    precincts_tr = precincts_tr if precincts_tr is not None else ["_"] * len(y_tr)
    precincts_te = precincts_te if precincts_te is not None else ["_"] * X_te.shape[0]
    model = fit_statistical_model(X_tr, y_tr.astype(float), np.ones(len(y_tr)), precincts_tr, cfg, names)
    return model.score(X_te, precincts_te)


def holdout_split(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_test = max(1, int(round(test_fraction * n)))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def learning_curve(X, y, cfg: ModelConfig, fractions: Sequence[float], replications: int = 5,
                   seed: int = 0, test_fraction: float = 0.25, names: Sequence[str] | None = None,
                   precincts: Sequence[str] | None = None) -> CurveSeries:
    """Holdout AUROC against training-set size.

    The holdout split is fixed by ``seed``; each (fraction, replication)
    draws its training subset from a generator seeded by
    (seed, fraction index, replication), so results do not depend on
    evaluation order.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    names = list(names) if names is not None else [f"x{j}" for j in range(X.shape[1])]
    prec = np.asarray(precincts if precincts is not None else ["_"] * len(y), dtype=object)
    train, test = holdout_split(len(y), test_fraction, seed)
    if len(set(y[test])) < 2:
        raise MetricError("holdout split has a single class")
    xs, means, spreads, skipped = [], [], [], []
    for fi, frac in enumerate(sorted(fractions)):
        if not 0.0 < frac <= 1.0:
            raise MetricError(f"fraction {frac} outside (0, 1]")
        size = max(1, int(round(frac * len(train))))
        vals = []
        for rep in range(replications):
            rng = np.random.default_rng([seed, fi, rep])
            sub = train if size == len(train) else np.sort(rng.choice(train, size=size, replace=False))
            if np.bincount(y[sub], minlength=2).min() < 2:
                continue
            s = _fit_and_score(X[sub], y[sub], X[test], cfg, names, list(prec[sub]), list(prec[test]))
            vals.append(auroc(s, y[test]))
        if not vals:
            skipped.append(frac)
            continue
        if xs and size <= xs[-1]:
            continue
        xs.append(size)
        means.append(float(np.mean(vals)))
        spreads.append(float(np.std(vals)))
    return CurveSeries("learning_curve", np.array(xs, dtype=float), np.array(means), np.array(spreads),
                       meta={"skipped_fractions": skipped, "replications": replications, "seed": seed,
                             "test_size": int(len(test))})


def temporal_learning_curve(X, y, epochs, cfg: ModelConfig, period: int = 1,
                            names: Sequence[str] | None = None,
                            precincts: Sequence[str] | None = None) -> CurveSeries:
    """AUROC on not-yet-visited homes as data arrive period by period.

    At the end of each period the model is refit on every home observed so
    far and scored on homes observed later.  Periods whose future set is
    empty or single-class produce no point.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    epochs = np.asarray(epochs, dtype=int)
    if period < 1:
        raise MetricError("period must be at least 1")
    names = list(names) if names is not None else [f"x{j}" for j in range(X.shape[1])]
    prec = np.asarray(precincts if precincts is not None else ["_"] * len(y), dtype=object)
    start = epochs.min()
    bucket = (epochs - start) // period
    xs, ys, bounds, absent = [], [], [], []
    for j in np.unique(bucket):
        past = bucket <= j
        future = ~past
        if not future.any():
            continue
        if len(set(y[future])) < 2 or len(set(y[past])) < 1:
            absent.append(int(start + (j + 1) * period))
            continue
        s = _fit_and_score(X[past], y[past], X[future], cfg, names, list(prec[past]), list(prec[future]))
        xs.append(int(past.sum()))
        ys.append(auroc(s, y[future]))
        bounds.append(int(start + (j + 1) * period))
    return CurveSeries("temporal_learning_curve", np.array(xs, dtype=float), np.array(ys, dtype=float),
                       meta={"period_end": bounds, "absent": absent, "period": period})


# ---------------------------------------------------------------------------
# prevalence interval
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PrevalenceInterval:
    low: float
    point: float
    high: float
    confidence: float
    draws: np.ndarray = field(compare=False, repr=False)


def prevalence_interval(X, labels, cfg: ModelConfig, n_bootstrap: int = 200, confidence: float = 0.95,
                        seed: int = 0, names: Sequence[str] | None = None,
                        precincts: Sequence[str] | None = None, stratified: bool = False,
                        fitter: Callable | None = None) -> PrevalenceInterval:
    """Bootstrap interval for the number of hazardous homes in the city.

    ``labels`` holds 0/1 for labeled homes and -1 for unknown ones.  Each
    replicate resamples the labeled homes (within precincts when
    ``stratified``), refits, and draws the unknown homes' outcomes from the
    refitted probabilities; the replicate count is that draw plus the known
    hazardous homes.  The point estimate uses the original fit and expected
    counts.  The interval is the percentile interval, widened if needed to
    contain the point estimate.
    """
    if n_bootstrap < 2:
        raise MetricError("n_bootstrap must be at least 2")
    if not 0.0 < confidence < 1.0:
        raise MetricError("confidence must lie in (0, 1)")
    X = np.asarray(X, dtype=float)
    lab = np.asarray(labels, dtype=int)
    known = np.flatnonzero(lab >= 0)
    unknown = np.flatnonzero(lab < 0)
    if len(known) == 0:
        raise MetricError("need at least one labeled home")
    names = list(names) if names is not None else [f"x{j}" for j in range(X.shape[1])]
    prec = np.asarray(precincts if precincts is not None else ["_"] * len(lab), dtype=object)
    n_known_haz = int(lab[known].sum())
    score = fitter or (lambda tr, te: _fit_and_score(X[tr], lab[tr], X[te], cfg, names,
                                                     list(prec[tr]), list(prec[te])))
    if len(unknown) == 0:
        k = float(n_known_haz)
        return PrevalenceInterval(k, k, k, confidence, np.full(n_bootstrap, k))
    point = n_known_haz + float(score(known, unknown).sum())
    groups = [known[prec[known] == g] for g in sorted(set(prec[known]))] if stratified else [known]
    draws = np.empty(n_bootstrap)
    for rep in range(n_bootstrap):
        rng = np.random.default_rng([seed, rep])
        sample = np.concatenate([rng.choice(g, size=len(g), replace=True) for g in groups])
        p = score(sample, unknown)
        draws[rep] = n_known_haz + float((rng.random(len(p)) < p).sum())
    alpha = 1.0 - confidence
    low, high = np.quantile(draws, [alpha / 2.0, 1.0 - alpha / 2.0])
    return PrevalenceInterval(float(min(low, point)), point, float(max(high, point)), confidence, draws)
