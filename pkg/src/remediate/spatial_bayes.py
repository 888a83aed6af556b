"""Precinct-level partial pooling of hazard rates.

Hazard counts in each precinct are treated as beta-binomial draws around a
city-wide Beta(alpha, beta) prior fitted by the method of moments.  The
posterior mean of each precinct then shifts the machine-learning
probabilities on the log-odds scale.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

MAX_CONCENTRATION = 1e6
MIN_CONCENTRATION = 1e-3
PROB_CLAMP = 1e-6


class PoolingError(ValueError):
    pass


@dataclass(frozen=True)
class PrecinctStats:
    precinct: str
    n: int
    k: int

    def __post_init__(self):
        if not 0 <= self.k <= self.n:
            raise PoolingError(f"precinct {self.precinct!r}: need 0 <= k <= n, got k={self.k}, n={self.n}")


@dataclass(frozen=True)
class PoolingModel:
    alpha: float
    beta: float
    stats: Mapping[str, PrecinctStats] = field(default_factory=dict)

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise PoolingError("alpha and beta must be positive")

    @property
    def city_rate(self) -> float:
        return self.alpha / (self.alpha + self.beta)

    @property
    def concentration(self) -> float:
        return self.alpha + self.beta

    def posterior_mean(self, precinct: str) -> float:
        s = self.stats.get(precinct)
        if s is None:
            return self.city_rate
        return precinct_posterior_mean(self, s)

    def posterior_means(self) -> dict[str, float]:
        return {p: precinct_posterior_mean(self, s) for p, s in self.stats.items()}

    def to_json(self, lam: float | None = None) -> dict:
        doc = {
            "alpha": self.alpha,
            "beta": self.beta,
            "precincts": {p: [s.n, s.k] for p, s in sorted(self.stats.items())},
        }
        if lam is not None:
            doc["lambda"] = lam
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "PoolingModel":
        stats = {p: PrecinctStats(p, int(n), int(k)) for p, (n, k) in doc.get("precincts", {}).items()}
        return cls(float(doc["alpha"]), float(doc["beta"]), stats)


def precinct_stats(precincts: Sequence[str], labels: Iterable[int]) -> list[PrecinctStats]:
    n: dict[str, int] = {}
    k: dict[str, int] = {}
    for p, y in zip(precincts, labels):
        n[p] = n.get(p, 0) + 1
        k[p] = k.get(p, 0) + int(y)
    return [PrecinctStats(p, n[p], k[p]) for p in sorted(n)]


def fit_hyperparameters(stats: Sequence[PrecinctStats]) -> PoolingModel:
    """Method-of-moments Beta prior over precinct hazard rates.

    With raw rates r_j = k_j / n_j, mean m and (population) variance s2, the
    expected binomial noise is m(1 - m) * mean(1/n_j).  What is left over is
    the between-precinct variance tau2, and the Beta concentration follows
    from Var = m(1 - m) / (alpha + beta + 1).  No excess variance means
    complete pooling, capped at a concentration of 1e6.
    """
    used = [s for s in stats if s.n >= 1]
    if not used:
        raise PoolingError("no precinct has any labeled homes")
    if len(used) < 2:
        raise PoolingError("need at least two precincts with labeled homes")
    n = np.array([s.n for s in used], dtype=float)
    rates = np.array([s.k for s in used], dtype=float) / n
    m = float(rates.mean())
    m = min(max(m, PROB_CLAMP), 1.0 - PROB_CLAMP)
    s2 = float(rates.var())
    tau2 = s2 - m * (1.0 - m) * float(np.mean(1.0 / n))
    if tau2 <= 0:
        conc = MAX_CONCENTRATION
    else:
        conc = m * (1.0 - m) / tau2 - 1.0
        conc = min(max(conc, MIN_CONCENTRATION), MAX_CONCENTRATION)
    return PoolingModel(m * conc, (1.0 - m) * conc, {s.precinct: s for s in stats})


def precinct_posterior_mean(model: PoolingModel, stats: PrecinctStats) -> float:
    return (model.alpha + stats.k) / (model.alpha + model.beta + stats.n)


@dataclass(frozen=True)
class RecalibrationConfig:
    lam: float = 0.5

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise PoolingError("lambda must be finite and non-negative")


def _logit(p):
    return np.log(p) - np.log1p(-p)


def recalibrate(p, precinct_rate, city_rate, cfg: RecalibrationConfig = RecalibrationConfig()):
    """Shift ML probabilities by the precinct's log-odds departure from the city rate.

    Probabilities of exactly 0 or 1 are clamped to [1e-6, 1 - 1e-6] first.
    Returns an array (or float for scalar input).
    """
    scalar = np.ndim(p) == 0
    p = np.asarray(p, dtype=float)
    n_clamped = int(np.count_nonzero((p < PROB_CLAMP) | (p > 1.0 - PROB_CLAMP)))
    if n_clamped:
        log.warning("recalibrate: %d probabilities clamped to [%g, 1 - %g]", n_clamped, PROB_CLAMP, PROB_CLAMP)
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    r = np.clip(np.asarray(precinct_rate, dtype=float), PROB_CLAMP, 1.0 - PROB_CLAMP)
    rbar = np.clip(np.asarray(city_rate, dtype=float), PROB_CLAMP, 1.0 - PROB_CLAMP)
    shift = cfg.lam * (_logit(r) - _logit(rbar))
    with np.errstate(over="ignore"):
        adjusted = 1.0 / (1.0 + np.exp(-(_logit(p) + shift)))
    out = np.where(shift == 0, p, adjusted)
    return float(out) if scalar else out
