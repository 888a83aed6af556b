"""Gradient-boosted classification trees with logistic loss, plus an
L1-penalised logistic baseline.

Trees are grown level by level on histogram bins.  Every split learns a
default direction for missing values.  Leaf values are Newton steps
``-G / (H + l2_penalty)`` scaled by the learning rate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class ModelError(ValueError):
    pass


def sigmoid(z):
    # tanh form never overflows and stays strictly inside (0, 1) for |z| < ~36
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def _as_training_arrays(X, y, weight):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    if X.shape[0] < 1:
        raise ModelError("need at least one training example")
    if y.shape != (X.shape[0],) or not np.isin(y, (0.0, 1.0)).all():
        raise ModelError("labels must be a 0/1 vector matching the rows of X")
    if weight is None:
        weight = np.ones_like(y)
    weight = np.asarray(weight, dtype=float)
    if weight.shape != y.shape or not np.all(np.isfinite(weight)) or np.any(weight <= 0):
        raise ModelError("weights must be finite and positive")
    return X, y, weight


def base_log_odds(y, weight):
    """Log-odds of the weighted prevalence, clamped when only one class is present."""
    pos = float(np.dot(weight, y))
    tot = float(weight.sum())
    if pos <= 0.0 or pos >= tot:
        rate = (pos + 0.5) / (tot + 1.0)
        return float(logit(rate)), True
    return float(logit(pos / tot)), False


def weighted_log_loss(y, p, weight) -> float:
    p = np.clip(p, 1e-15, 1 - 1e-15)
    return float(-np.dot(weight, y * np.log(p) + (1 - y) * np.log1p(-p)) / weight.sum())


@dataclass(frozen=True)
class BoostConfig:
    n_rounds: int = 200
    max_depth: int = 4
    learning_rate: float = 0.1
    min_child_weight: float = 1.0
    l2_penalty: float = 1.0
    max_bins: int = 64
    subsample: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_rounds < 0:
            raise ModelError("n_rounds must be non-negative")
        if self.max_depth < 1:
            raise ModelError("max_depth must be at least 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ModelError("learning_rate must lie in (0, 1]")
        if self.min_child_weight < 0 or self.l2_penalty < 0:
            raise ModelError("penalties must be non-negative")
        if self.max_bins < 2:
            raise ModelError("max_bins must be at least 2")
        if not 0.0 < self.subsample <= 1.0:
            raise ModelError("subsample must lie in (0, 1]")


@dataclass(frozen=True)
class Tree:
    """Array-encoded binary tree.  ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    missing_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_splits(self) -> int:
        return int((self.feature >= 0).sum())

    def apply(self, X: np.ndarray) -> np.ndarray:
        n = X.shape[0]
        idx = np.zeros(n, dtype=np.int64)
        rows = np.arange(n)
        while True:
            f = self.feature[idx]
            internal = f >= 0
            if not internal.any():
                return idx
            x = X[rows, np.where(internal, f, 0)]
            go_left = np.where(np.isnan(x), self.missing_left[idx], x <= self.threshold[idx])
            idx = np.where(internal, np.where(go_left, self.left[idx], self.right[idx]), idx)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_nodes(self) -> list[list]:
        # leaves carry no threshold; JSON has no NaN, so they serialise as null
        return [
            [int(f), float(t) if f >= 0 else None, bool(m), int(lo), int(hi), float(v)]
            for f, t, m, lo, hi, v in zip(self.feature, self.threshold, self.missing_left,
                                          self.left, self.right, self.value)
        ]

    @classmethod
    def from_nodes(cls, nodes) -> "Tree":
        cols = list(zip(*nodes)) if nodes else [[]] * 6
        return cls(
            feature=np.array(cols[0], dtype=np.int64),
            threshold=np.array(cols[1], dtype=float),
            missing_left=np.array(cols[2], dtype=bool),
            left=np.array(cols[3], dtype=np.int64),
            right=np.array(cols[4], dtype=np.int64),
            value=np.array(cols[5], dtype=float),
        )


@dataclass(frozen=True)
class HazardClassifier:
    base_score: float
    trees: tuple[Tree, ...] = ()
    feature_names: tuple[str, ...] = ()
    clamped_base: bool = False

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if self.feature_names and X.shape[1] != self.n_features:
            raise ModelError(f"expected {self.n_features} features, got {X.shape[1]}")
        margin = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            margin += tree.predict(X)
        return margin

    def predict_proba(self, X) -> np.ndarray:
        """Hazard probability for each row (a 1-D input is one row)."""
        p = sigmoid(self.decision_function(X))
        # sigmoid saturates in float64 beyond |margin| ~ 37
        return np.clip(p, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))

    def to_json(self) -> dict:
        return {
            "kind": "boosted_trees",
            "base_score": self.base_score,
            "feature_names": list(self.feature_names),
            "clamped_base": self.clamped_base,
            "trees": [t.to_nodes() for t in self.trees],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "HazardClassifier":
        return cls(
            base_score=float(doc["base_score"]),
            trees=tuple(Tree.from_nodes(t) for t in doc["trees"]),
            feature_names=tuple(doc.get("feature_names", ())),
            clamped_base=bool(doc.get("clamped_base", False)),
        )


# ---------------------------------------------------------------------------
# histogram binning
# ---------------------------------------------------------------------------

def _thresholds(col: np.ndarray, weight: np.ndarray, max_bins: int) -> np.ndarray:
    ok = ~np.isnan(col)
    if not ok.any():
        return np.empty(0)
    vals, inv = np.unique(col[ok], return_inverse=True)
    if len(vals) <= max_bins:
        return vals
    w = np.bincount(inv, weights=weight[ok])
    cum = np.cumsum(w) / w.sum()
    targets = np.arange(1, max_bins) / max_bins
    picks = np.unique(np.searchsorted(cum, targets, side="left"))
    return vals[picks]


def _bin_matrix(X, weight, max_bins):
    thresholds = [_thresholds(X[:, j], weight, max_bins) for j in range(X.shape[1])]
    width = max(len(t) for t in thresholds) + 2  # value bins + one beyond the last edge + missing
    B = np.empty(X.shape, dtype=np.int64)
    for j, t in enumerate(thresholds):
        col = X[:, j]
        b = np.searchsorted(t, col, side="left")
        B[:, j] = np.where(np.isnan(col), width - 1, b)
    return B, thresholds, width


# ---------------------------------------------------------------------------
# tree growth
# ---------------------------------------------------------------------------

def _grow_tree(Bflat, missing_bin, thresholds, width, g, h, cfg: BoostConfig):
    """Grow one tree level by level.

    ``Bflat`` holds each row's bin index already offset by ``feature * width``
    so a single bincount yields every feature's histogram.  Of two siblings
    only the smaller is histogrammed; the other is parent minus small.
    """
    n, m = Bflat.shape
    lam = cfg.l2_penalty
    mcw = cfg.min_child_weight
    feature, threshold, missing_left, left, right = [-1], [np.nan], [True], [-1], [-1]
    value = [0.0]
    node_of = np.zeros(n, dtype=np.int64)
    n_edges = np.array([len(t) for t in thresholds])
    valid_bins = np.arange(width - 1)[None, :] < n_edges[:, None]
    size = m * width

    hist = {0: (np.bincount(Bflat.ravel(), weights=np.repeat(g, m), minlength=size).reshape(m, width),
                np.bincount(Bflat.ravel(), weights=np.repeat(h, m), minlength=size).reshape(m, width))}
    frontier = [0]
    for depth in range(cfg.max_depth + 1):
        split_nodes = []
        for node in frontier:
            G, H = hist.pop(node)
            Gn, Hn = G[0].sum(), H[0].sum()
            value[node] = -Gn / (Hn + lam) if Hn + lam > 0 else 0.0
            if depth == cfg.max_depth:
                continue
            gl = np.cumsum(G[:, :-1], axis=1)
            hl = np.cumsum(H[:, :-1], axis=1)
            gm = G[:, -1:]
            hm = H[:, -1:]
            parent = Gn * Gn / (Hn + lam) if Hn + lam > 0 else 0.0
            gains = np.empty((m, width - 1, 2))
            for d, (GL, HL) in enumerate(((gl + gm, hl + hm), (gl, hl))):
                GR, HR = Gn - GL, Hn - HL
                ok = valid_bins & (HL > 0) & (HR > 0) & (HL >= mcw) & (HR >= mcw)
                with np.errstate(divide="ignore", invalid="ignore"):
                    gain = GL * GL / (HL + lam) + GR * GR / (HR + lam) - parent
                gains[:, :, d] = np.where(ok, gain, -np.inf)
            best = int(np.argmax(gains))
            f, b, d = np.unravel_index(best, gains.shape)
            if not gains[f, b, d] > 1e-12:
                continue
            lo = len(feature)
            hi = lo + 1
            for arr, v in ((feature, -1), (threshold, np.nan), (missing_left, True), (left, -1), (right, -1)):
                arr.extend((v, v))
            value.extend((0.0, 0.0))
            feature[node], threshold[node] = int(f), float(thresholds[f][b])
            missing_left[node] = bool(d == 0)
            left[node], right[node] = lo, hi
            split_nodes.append((node, int(f), int(b), bool(d == 0), lo, hi, G, H))
        if not split_nodes:
            break
        # route rows of split nodes to their children in one pass
        n_nodes = len(feature)
        s_feat = np.full(n_nodes, -1, dtype=np.int64)
        s_cut = np.zeros(n_nodes, dtype=np.int64)
        s_mleft = np.zeros(n_nodes, dtype=bool)
        s_lo = np.zeros(n_nodes, dtype=np.int64)
        for node, f, b, ml, lo, hi, _, _ in split_nodes:
            s_feat[node], s_cut[node], s_mleft[node], s_lo[node] = f, b, ml, lo
        rows = np.flatnonzero(s_feat[node_of] >= 0)
        nodes = node_of[rows]
        f_rows = s_feat[nodes]
        col = Bflat[rows, f_rows] - f_rows * width
        go_left = np.where(col == missing_bin, s_mleft[nodes], col <= s_cut[nodes])
        node_of[rows] = s_lo[nodes] + (~go_left)
        counts = np.bincount(node_of, minlength=n_nodes)
        small = {}
        for node, _, _, _, lo, hi, _, _ in split_nodes:
            small[lo if counts[lo] <= counts[hi] else hi] = None
        small_ids = np.array(sorted(small), dtype=np.int64)
        local = np.full(n_nodes, -1, dtype=np.int64)
        local[small_ids] = np.arange(len(small_ids))
        r = np.flatnonzero(local[node_of] >= 0)
        flat = (local[node_of[r]] * size)[:, None] + Bflat[r]
        tot = len(small_ids) * size
        Gs = np.bincount(flat.ravel(), weights=np.repeat(g[r], m), minlength=tot).reshape(-1, m, width)
        Hs = np.bincount(flat.ravel(), weights=np.repeat(h[r], m), minlength=tot).reshape(-1, m, width)
        frontier = []
        for node, _, _, _, lo, hi, G, H in split_nodes:
            s, other = (lo, hi) if lo in small else (hi, lo)
            j = local[s]
            hist[s] = (Gs[j], Hs[j])
            hist[other] = (G - Gs[j], H - Hs[j])
            frontier.extend((lo, hi))

    tree = Tree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=float),
        missing_left=np.array(missing_left, dtype=bool),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        value=np.array(value, dtype=float) * cfg.learning_rate,
    )
    return tree, node_of


def fit(X, y, cfg: BoostConfig = BoostConfig(), weight=None, feature_names=None) -> HazardClassifier:
    """Fit a boosted ensemble on (X, y) with optional importance weights."""
    X, y, weight = _as_training_arrays(X, y, weight)
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{j}" for j in range(X.shape[1]))
    if len(names) != X.shape[1]:
        raise ModelError("feature_names must match the columns of X")
    base, clamped = base_log_odds(y, weight)
    if clamped:
        log.warning("single-class training set (%d rows); base score clamped to %.4f", len(y), base)
    B, thresholds, width = _bin_matrix(X, weight, cfg.max_bins)
    Bflat = B + np.arange(B.shape[1], dtype=np.int64) * width
    rng = np.random.default_rng(cfg.seed)
    margin = np.full(len(y), base)
    trees = []
    for _ in range(cfg.n_rounds):
        p = sigmoid(margin)
        g = weight * (p - y)
        h = weight * p * (1.0 - p)
        if cfg.subsample < 1.0:
            keep = rng.random(len(y)) < cfg.subsample
            g, h = g * keep, h * keep
        tree, leaf_of = _grow_tree(Bflat, width - 1, thresholds, width, g, h, cfg)
        trees.append(tree)
        margin = margin + tree.value[leaf_of]
    return HazardClassifier(base, tuple(trees), names, clamped)


def training_loss_path(model: HazardClassifier, X, y, weight=None) -> list[float]:
    """Weighted log loss after 0, 1, ..., n_rounds trees."""
    X, y, weight = _as_training_arrays(X, y, weight)
    margin = np.full(len(y), model.base_score)
    out = [weighted_log_loss(y, sigmoid(margin), weight)]
    for tree in model.trees:
        margin = margin + tree.predict(X)
        out.append(weighted_log_loss(y, sigmoid(margin), weight))
    return out


def feature_importance(model: HazardClassifier) -> dict[str, float]:
    """Share of all splits in the ensemble made on each feature."""
    counts = np.zeros(len(model.feature_names))
    for tree in model.trees:
        for f in tree.feature[tree.feature >= 0]:
            counts[f] += 1
    total = counts.sum()
    if total == 0:
        return {}
    return {name: c / total for name, c in zip(model.feature_names, counts) if c > 0}


# ---------------------------------------------------------------------------
# L1 logistic baseline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LogisticModel:
    intercept: float
    coef: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    feature_names: tuple[str, ...] = ()
    loss_path: tuple[float, ...] = field(default=(), compare=False)

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != len(self.coef):
            raise ModelError(f"expected {len(self.coef)} features, got {X.shape[1]}")
        Z = np.nan_to_num((X - self.mean) / self.scale, nan=0.0)
        return self.intercept + Z @ self.coef

    def predict_proba(self, X) -> np.ndarray:
        return np.clip(sigmoid(self.decision_function(X)), np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))

    def to_json(self) -> dict:
        return {
            "kind": "l1_logistic",
            "intercept": self.intercept,
            "coef": self.coef.tolist(),
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "feature_names": list(self.feature_names),
        }


def _penalized_loss(y, w, eta, coef, l1):
    # log(1 + e^eta) - y*eta, computed stably
    nll = np.logaddexp(0.0, eta) - y * eta
    return float(np.dot(w, nll) / w.sum() + l1 * np.abs(coef).sum())


def fit_logistic_baseline(X, y, l1_strength: float = 0.01, weight=None, seed: int = 0,
                          max_sweeps: int = 500, tol: float = 1e-9,
                          feature_names=None) -> LogisticModel:
    """Weighted L1 logistic regression by majorised coordinate descent.

    Each coordinate step minimises a quadratic upper bound of the logistic
    loss (curvature <= 1/4), so the penalised objective never increases.
    Features are standardised internally; missing cells sit at the mean.
    ``seed`` is accepted for interface symmetry; the sweep order is fixed.
    """
    del seed
    X, y, weight = _as_training_arrays(X, y, weight)
    if l1_strength < 0:
        raise ModelError("l1_strength must be non-negative")
    n, m = X.shape
    mean = np.zeros(m)
    scale = np.ones(m)
    for j in range(m):
        col = X[:, j]
        ok = ~np.isnan(col)
        if ok.any():
            mean[j] = col[ok].mean()
            sd = col[ok].std()
            scale[j] = sd if sd > 0 else 1.0
    Z = np.nan_to_num((X - mean) / scale, nan=0.0)
    wn = weight / weight.sum()
    intercept, _ = base_log_odds(y, weight)
    coef = np.zeros(m)
    eta = np.full(n, intercept)
    curv = 0.25 * (wn @ (Z * Z))
    losses = [_penalized_loss(y, weight, eta, coef, l1_strength)]
    for _ in range(max_sweeps):
        for j in range(m):
            if curv[j] <= 0:
                continue
            grad = float(wn @ ((sigmoid(eta) - y) * Z[:, j]))
            z = coef[j] - grad / curv[j]
            new = np.sign(z) * max(abs(z) - l1_strength / curv[j], 0.0)
            if new != coef[j]:
                eta += (new - coef[j]) * Z[:, j]
                coef[j] = new
        grad0 = float(wn @ (sigmoid(eta) - y))
        step = -grad0 / 0.25
        intercept += step
        eta += step
        losses.append(_penalized_loss(y, weight, eta, coef, l1_strength))
        if losses[-2] - losses[-1] < tol:
            break
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{j}" for j in range(m))
    return LogisticModel(float(intercept), coef, mean, scale, names, tuple(losses))
