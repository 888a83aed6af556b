"""Inspection and replacement decision rules.

All rules operate on a pool of parcel ids plus aligned score arrays.  Ties
are always broken by ascending parcel id, and callers own the random
generator, so a rule is a pure function of its inputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class InspectionBatch:
    ids: tuple[str, ...] = ()
    weights: tuple[float, ...] = ()
    propensities: tuple[float, ...] = ()
    exhausted: bool = False
    clipped: int = 0

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class IwalConfig:
    p_star: float = 0.7
    sigma: float = 0.2
    eta: float = 0.1
    w_max: float = 20.0

    def __post_init__(self):
        if not 0.0 < self.p_star < 1.0:
            raise PolicyError("p_star must lie in (0, 1)")
        if not self.sigma > 0:
            raise PolicyError("sigma must be positive")
        if not 0.0 <= self.eta < 1.0:
            raise PolicyError("eta must lie in [0, 1)")
        if not self.w_max >= 1.0:
            raise PolicyError("w_max must be at least 1")


@dataclass(frozen=True)
class SelectionDistribution:
    ids: tuple[str, ...]
    phi: np.ndarray = field(compare=False)

    def __post_init__(self):
        if len(self.ids) != len(self.phi):
            raise PolicyError("phi must align with ids")
        if np.any(self.phi < 0) or abs(float(self.phi.sum()) - 1.0) > 1e-9:
            raise PolicyError("phi must be a probability vector")


def _ordered(pool: Sequence[str], scores=None):
    ids = np.asarray(list(pool), dtype=object)
    order = np.argsort(ids.astype(str), kind="stable")
    ids = ids[order]
    if scores is None:
        return ids, None
    scores = np.asarray(scores, dtype=float)
    if scores.shape != (len(order),):
        raise PolicyError("every home in the pool needs exactly one score")
    return ids, scores[order]


def _top_k(ids: np.ndarray, scores: np.ndarray, k: int) -> list[str]:
    # ids are sorted ascending, so a stable sort on -score keeps the id tie-break
    order = np.argsort(-scores, kind="stable")
    return [str(x) for x in ids[order[:k]]]


def select_uniform(pool: Sequence[str], d: int, rng: np.random.Generator) -> InspectionBatch:
    ids, _ = _ordered(pool)
    if d < 0:
        raise PolicyError("batch size must be non-negative")
    exhausted = d >= len(ids)
    if d == 0:
        return InspectionBatch(exhausted=exhausted)
    k = min(d, len(ids))
    picks = rng.choice(len(ids), size=k, replace=False)
    chosen = tuple(str(ids[i]) for i in picks)
    return InspectionBatch(chosen, (1.0,) * k, (1.0 / len(ids),) * k, exhausted)


def select_greedy(pool: Sequence[str], scores, d: int) -> InspectionBatch:
    ids, s = _ordered(pool, scores)
    if d < 0:
        raise PolicyError("batch size must be non-negative")
    k = min(d, len(ids))
    chosen = tuple(_top_k(ids, s, k))
    return InspectionBatch(chosen, (1.0,) * k, (1.0,) * k, d >= len(ids))


def select_egreedy(pool: Sequence[str], scores, d: int, epsilon: float,
                   rng: np.random.Generator) -> InspectionBatch:
    """Greedy picks for a (1 - epsilon) share of the batch, uniform picks for the rest.

    epsilon=0 consumes no randomness and equals :func:`select_greedy`;
    epsilon=1 equals :func:`select_uniform` draw for draw.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise PolicyError("epsilon must lie in [0, 1]")
    ids, s = _ordered(pool, scores)
    k = min(d, len(ids))
    n_random = int(round(epsilon * k))
    if n_random == 0:
        return select_greedy(pool, scores, d)
    if n_random == k:
        return select_uniform(pool, d, rng)
    greedy = _top_k(ids, s, k - n_random)
    taken = set(greedy)
    rest = np.array([x for x in ids if x not in taken], dtype=object)
    picks = rng.choice(len(rest), size=n_random, replace=False)
    randoms = [str(rest[i]) for i in picks]
    chosen = tuple(greedy + randoms)
    return InspectionBatch(chosen, (1.0,) * k, (1.0,) * (k - n_random) + (1.0 / len(rest),) * n_random,
                           d >= len(ids))


def iwal_distribution(pool: Sequence[str], scores, cfg: IwalConfig = IwalConfig()) -> SelectionDistribution:
    """Sampling distribution favouring homes whose risk is near ``p_star``.

    Gaussian kernel weights around p_star, normalised, then mixed with the
    uniform distribution at rate eta so every home keeps probability
    at least eta / |U|.
    """
    ids, s = _ordered(pool, scores)
    if len(ids) == 0:
        raise PolicyError("cannot build a selection distribution over an empty pool")
    w = iwal_kernel(s, cfg)
    total = w.sum()
    base = w / total if total > 0 else np.full(len(ids), 1.0 / len(ids))
    phi = (1.0 - cfg.eta) * base + cfg.eta / len(ids)
    phi = phi / phi.sum()
    return SelectionDistribution(tuple(str(x) for x in ids), phi)


def iwal_kernel(scores, cfg: IwalConfig = IwalConfig()) -> np.ndarray:
    s = np.asarray(scores, dtype=float)
    return np.exp(-((s - cfg.p_star) ** 2) / (2.0 * cfg.sigma ** 2))


def importance_weight(pool_size: int, phi_i: float, w_max: float) -> tuple[float, bool]:
    """1 / (|U| * phi_i) clipped to [1, w_max]; also reports whether the upper clip fired."""
    raw = 1.0 / (pool_size * phi_i)
    return float(min(max(raw, 1.0), w_max)), raw > w_max


def sample_batch(phi: SelectionDistribution, d: int, rng: np.random.Generator,
                 w_max: float = 20.0) -> InspectionBatch:
    """Draw d distinct homes one at a time, renormalising phi after each draw.

    Each draw records the probability it had at draw time (its propensity)
    and the clipped importance weight derived from it.
    """
    if d < 0:
        raise PolicyError("batch size must be non-negative")
    p = phi.phi.astype(float).copy()
    support = int((p > 0).sum())
    k = min(d, support)
    ids, weights, props = [], [], []
    clipped = 0
    remaining = len(p)
    for _ in range(k):
        total = p.sum()
        probs = p / total
        i = int(np.searchsorted(np.cumsum(probs), rng.random() * probs.sum(), side="right"))
        i = min(i, len(p) - 1)
        while probs[i] == 0:  # guard against float edge at the cumsum boundary
            i -= 1
        w, hit = importance_weight(remaining, probs[i], w_max)
        clipped += hit
        ids.append(phi.ids[i])
        weights.append(w)
        props.append(float(probs[i]))
        p[i] = 0.0
        remaining -= 1
    if clipped:
        log.info("importance weight clipped at w_max=%g for %d of %d draws", w_max, clipped, k)
    return InspectionBatch(tuple(ids), tuple(weights), tuple(props), d >= support, clipped)


def weighted_prevalence(batch: InspectionBatch, labels: Sequence[int], pool_size: int,
                        w_max: float = 20.0) -> float:
    """Self-normalised importance-weighted hazard rate of an inspected batch.

    Uses inverse propensities 1 / (|U_j| * phi_j) capped at ``w_max``,
    where |U_j| is the pool remaining at draw j.  The lower clip applied to
    training weights is not used here: it would bias the estimate toward
    the oversampled region.
    """
    y = np.asarray(labels, dtype=float)
    sizes = pool_size - np.arange(len(batch))
    w = np.minimum(1.0 / (sizes * np.asarray(batch.propensities)), w_max)
    return float(np.dot(w, y) / w.sum())


def select_replacements(pool: Sequence[str], scores, b: int,
                        pending: Sequence[str] = ()) -> tuple[list[str], bool]:
    """Pending known-hazardous homes first, then the top-scored unknown homes.

    Returns the chosen ids and a completion flag (nothing left to visit).
    """
    if b < 0:
        raise PolicyError("batch size must be non-negative")
    chosen = list(pending[:b])
    left = b - len(chosen)
    if left > 0 and len(pool):
        ids, s = _ordered(pool, scores)
        chosen.extend(_top_k(ids, s, left))
    done = len(pool) == 0 and len(pending) <= b
    return chosen, done


# ---------------------------------------------------------------------------
# policy strings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Policy:
    kind: str
    epsilon: float = 0.0
    iwal: IwalConfig = IwalConfig()

    def __str__(self) -> str:
        if self.kind == "egreedy":
            return f"egreedy:{self.epsilon:g}"
        if self.kind == "iwal":
            c = self.iwal
            return f"iwal:{c.p_star:g},{c.sigma:g},{c.eta:g}"
        return self.kind

    def select(self, pool: Sequence[str], scores, d: int, rng: np.random.Generator) -> InspectionBatch:
        if d <= 0 or len(pool) == 0:
            return InspectionBatch(exhausted=len(pool) <= max(d, 0))
        if self.kind == "none":
            return InspectionBatch()
        if self.kind == "uniform":
            return select_uniform(pool, d, rng)
        if self.kind == "greedy":
            return select_greedy(pool, scores, d)
        if self.kind == "egreedy":
            return select_egreedy(pool, scores, d, self.epsilon, rng)
        phi = iwal_distribution(pool, scores, self.iwal)
        return sample_batch(phi, d, rng, self.iwal.w_max)


def parse_policy(spec: str) -> Policy:
    """Parse ``uniform | greedy | none | egreedy:<eps> | iwal:<p_star>[,<sigma>,<eta>]``."""
    text = spec.strip().lower()
    name, _, arg = text.partition(":")
    try:
        if name in ("uniform", "greedy", "none") and not arg:
            return Policy(name)
        if name == "egreedy":
            eps = float(arg)
            if not 0.0 <= eps <= 1.0:
                raise PolicyError(f"epsilon out of range in {spec!r}")
            return Policy("egreedy", epsilon=eps)
        if name == "iwal":
            parts = [float(x) for x in arg.split(",")] if arg else []
            if len(parts) not in (0, 1, 3):
                raise PolicyError(f"iwal takes p_star or p_star,sigma,eta: {spec!r}")
            defaults = IwalConfig()
            p_star = parts[0] if parts else defaults.p_star
            sigma, eta = (parts[1], parts[2]) if len(parts) == 3 else (defaults.sigma, defaults.eta)
            return Policy("iwal", iwal=IwalConfig(p_star, sigma, eta))
    except ValueError as exc:
        if isinstance(exc, PolicyError):
            raise
        raise PolicyError(f"bad policy {spec!r}: {exc}") from None
    raise PolicyError(f"unknown policy {spec!r}")
