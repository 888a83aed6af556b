"""The inspect-then-replace loop, its cost ledger and evaluation environments."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .classifier import BoostConfig, HazardClassifier, fit, fit_logistic_baseline
from .data_model import (
    CityDataset,
    DataError,
    FeatureEncoder,
    PortionMaterial,
    SyntheticCity,
    derive_label,
)
from .decision import Policy, parse_policy, select_replacements
from .spatial_bayes import (
    PoolingError,
    PoolingModel,
    RecalibrationConfig,
    fit_hyperparameters,
    precinct_stats,
    recalibrate,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class LedgerError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# costs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostSchedule:
    c_h: float = 250.0
    c_r_plus: float = 5000.0
    c_r_minus: float = 2500.0

    def __post_init__(self):
        if min(self.c_h, self.c_r_plus, self.c_r_minus) <= 0:
            raise ConfigError("all unit costs must be positive")
        if not self.c_r_minus < self.c_r_plus:
            raise ConfigError("an unnecessary visit must cost less than a replacement")


@dataclass
class CostLedger:
    schedule: CostSchedule = field(default_factory=CostSchedule)
    n_h: int = 0
    n_r_plus: int = 0
    n_r_minus: int = 0
    total: float = 0.0

    def check(self) -> None:
        s = self.schedule
        expected = s.c_h * self.n_h + s.c_r_plus * self.n_r_plus + s.c_r_minus * self.n_r_minus
        # exact for whole-dollar schedules; a relative 1e-12 allowance covers fractional cents
        if abs(self.total - expected) > 1e-12 * max(1.0, abs(expected)):
            raise LedgerError(f"ledger identity broken: {self.total} != {expected}")

    def affordable(self, cost: float, budget: float) -> bool:
        return self.total + cost <= budget

    def record_inspection(self) -> float:
        self.n_h += 1
        self.total += self.schedule.c_h
        self.check()
        return self.schedule.c_h

    def record_replacement(self, hazardous: bool) -> float:
        if hazardous:
            self.n_r_plus += 1
            cost = self.schedule.c_r_plus
        else:
            self.n_r_minus += 1
            cost = self.schedule.c_r_minus
        self.total += cost
        self.check()
        return cost

    @property
    def n_replacement_visits(self) -> int:
        return self.n_r_plus + self.n_r_minus

    def snapshot(self) -> dict:
        return {"n_h": self.n_h, "n_r_plus": self.n_r_plus, "n_r_minus": self.n_r_minus,
                "total_costs": self.total}


def hit_rate(ledger: CostLedger) -> float | None:
    """Share of replacement visits that found a hazardous line; None with no visits."""
    visits = ledger.n_r_plus + ledger.n_r_minus
    if visits == 0:
        return None
    return ledger.n_r_plus / visits


def effective_cost(ledger: CostLedger) -> float | None:
    """Total spend per successful replacement; None before the first success."""
    if ledger.n_r_plus == 0:
        return None
    return ledger.total / ledger.n_r_plus


def ledger_from_counts(n_h: int, n_r_plus: int, n_r_minus: int,
                       schedule: CostSchedule = CostSchedule()) -> CostLedger:
    ledger = CostLedger(schedule)
    for _ in range(n_h):
        ledger.record_inspection()
    for _ in range(n_r_plus):
        ledger.record_replacement(True)
    for _ in range(n_r_minus):
        ledger.record_replacement(False)
    return ledger


# ---------------------------------------------------------------------------
# environments
# ---------------------------------------------------------------------------

class Environment:
    """Answers inspection and replacement queries with true materials.

    ``dataset`` is the public view: features only, every label unknown.
    """

    def __init__(self, dataset: CityDataset, truth: Mapping[str, tuple[PortionMaterial, PortionMaterial]]):
        missing = [pid for pid in dataset.parcels if pid not in truth]
        if missing:
            raise DataError(f"{len(missing)} parcels have no ground truth, e.g. {missing[0]!r}")
        self.dataset = CityDataset(
            parcels={pid: replace(r, label=None) for pid, r in dataset.parcels.items()},
            precincts=dataset.precincts,
            feature_names=dataset.feature_names,
        )
        self._truth = dict(truth)

    def materials(self, parcel_id: str) -> tuple[PortionMaterial, PortionMaterial]:
        return self._truth[parcel_id]

    def label(self, parcel_id: str) -> int:
        return derive_label(*self._truth[parcel_id])

    @property
    def n_hazardous(self) -> int:
        return sum(derive_label(*m) for m in self._truth.values())


class Backtest(Environment):
    """Replays a fully verified dataset as the answer key."""

    def __init__(self, dataset: CityDataset):
        truth = dataset.materials()
        unlabeled = [pid for pid in dataset.parcels if pid not in truth]
        if unlabeled:
            raise DataError(f"backtest needs every parcel verified; {len(unlabeled)} are not")
        super().__init__(dataset, truth)


class Generative(Environment):
    """A synthetic city whose hidden labels were drawn by a generator."""

    def __init__(self, city: SyntheticCity):
        super().__init__(city.dataset, city.truth)


# ---------------------------------------------------------------------------
# statistical model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    kind: str = "boosted"
    boost: BoostConfig = BoostConfig()
    l1_strength: float = 0.001
    spatial_lambda: float = 0.5
    label_mode: str = "single"
    features: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("boosted", "logistic"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.label_mode not in ("single", "portion"):
            raise ConfigError(f"unknown label mode {self.label_mode!r}")
        RecalibrationConfig(self.spatial_lambda)

    @classmethod
    def from_json(cls, doc: Mapping) -> "ModelConfig":
        doc = dict(doc)
        feats = doc.pop("features", None)
        try:
            boost = BoostConfig(**doc.pop("boost", {}))
            return cls(boost=boost, features=tuple(feats) if feats is not None else None, **doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["features"] = list(self.features) if self.features is not None else None
        return doc


def _fit_one(X, y, w, cfg: ModelConfig, names):
    if cfg.kind == "logistic":
        return fit_logistic_baseline(X, y, cfg.l1_strength, weight=w, seed=cfg.boost.seed, feature_names=names)
    return fit(X, y, cfg.boost, weight=w, feature_names=names)


@dataclass(frozen=True)
class FittedModel:
    """Classifier(s) plus precinct pooling; maps feature rows to hazard scores."""

    classifiers: tuple
    pooling: PoolingModel | None
    lam: float
    columns: np.ndarray
    constant: float | None = None

    def ml_proba(self, X: np.ndarray) -> np.ndarray:
        if self.constant is not None:
            return np.full(X.shape[0], self.constant)
        Xs = X[:, self.columns]
        if len(self.classifiers) == 1:
            return self.classifiers[0].predict_proba(Xs)
        p_pub, p_priv = (c.predict_proba(Xs) for c in self.classifiers)
        return 1.0 - (1.0 - p_pub) * (1.0 - p_priv)

    def score(self, X: np.ndarray, precincts: Sequence[str]) -> np.ndarray:
        p = self.ml_proba(X)
        if self.pooling is None or self.lam == 0:
            return p
        r = np.array([self.pooling.posterior_mean(q) for q in precincts])
        return recalibrate(p, r, self.pooling.city_rate, RecalibrationConfig(self.lam))

    def to_json(self, feature_names: Sequence[str]) -> dict:
        doc = {
            "columns": [feature_names[j] for j in self.columns],
            "label_mode": "portion" if len(self.classifiers) == 2 else "single",
            "models": [c.to_json() for c in self.classifiers],
        }
        if self.constant is not None:
            doc["constant"] = self.constant
        if self.pooling is not None:
            doc["spatial"] = self.pooling.to_json(self.lam)
        return doc


def select_columns(names: Sequence[str], wanted: Sequence[str] | None) -> np.ndarray:
    if wanted is None:
        return np.arange(len(names))
    cols = [j for j, n in enumerate(names) if any(n == w or n.startswith(w + "=") for w in wanted)]
    if not cols:
        raise ConfigError(f"no features match {list(wanted)}")
    return np.array(cols)


def fit_statistical_model(X: np.ndarray, y: np.ndarray, w: np.ndarray, precincts: Sequence[str],
                          cfg: ModelConfig, names: Sequence[str],
                          portions: tuple[np.ndarray, np.ndarray] | None = None) -> FittedModel:
    cols = select_columns(names, cfg.features)
    if len(y) == 0:
        return FittedModel((), None, cfg.spatial_lambda, cols, constant=0.5)
    Xs = X[:, cols]
    sub = [names[j] for j in cols]
    if cfg.label_mode == "portion" and portions is not None:
        classifiers = tuple(_fit_one(Xs, yk, w, cfg, sub) for yk in portions)
    else:
        classifiers = (_fit_one(Xs, y, w, cfg, sub),)
    pooling = None
    if cfg.spatial_lambda > 0:
        try:
            pooling = fit_hyperparameters(precinct_stats(precincts, y))
        except PoolingError:
            pooling = None
    return FittedModel(classifiers, pooling, cfg.spatial_lambda, cols)


# ---------------------------------------------------------------------------
# experiment config and logs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    budget: float = math.inf
    epochs: int = 10
    inspections_per_epoch: int = 225
    replacements_per_epoch: int = 450
    costs: CostSchedule = CostSchedule()
    policy: str = "iwal:0.7"
    model: ModelConfig = ModelConfig()
    failure_rate: float = 0.0
    initial_labeled: int = 100
    target_successes: int | None = None
    truncate_visits: tuple[int, int] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.budget < 0 or self.epochs < 0 or self.inspections_per_epoch < 0 or self.replacements_per_epoch < 0:
            raise ConfigError("budget, epochs and batch sizes must be non-negative")
        if not 0.0 <= self.failure_rate < 1.0:
            raise ConfigError("failure_rate must lie in [0, 1)")
        if self.initial_labeled < 0:
            raise ConfigError("initial_labeled must be non-negative")
        parse_policy(self.policy)

    @property
    def parsed_policy(self) -> Policy:
        return parse_policy(self.policy)

    @classmethod
    def from_json(cls, doc: Mapping) -> "ExperimentConfig":
        doc = dict(doc)
        try:
            costs = CostSchedule(**doc.pop("costs", {}))
            model = ModelConfig.from_json(doc.pop("model", {}))
            trunc = doc.pop("truncate_visits", None)
            if doc.get("budget") is None:
                doc["budget"] = math.inf
            return cls(costs=costs, model=model,
                       truncate_visits=tuple(trunc) if trunc is not None else None, **doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["model"] = self.model.to_json()
        doc["budget"] = None if math.isinf(self.budget) else self.budget
        doc["truncate_visits"] = list(self.truncate_visits) if self.truncate_visits else None
        return doc


@dataclass(frozen=True)
class Event:
    kind: str  # "inspect" | "replace"
    parcel_id: str
    outcome: str  # "hazardous" | "safe" | "failed"
    cost: float


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    events: tuple[Event, ...]
    ledger: dict
    metrics: dict

    @property
    def inspected(self) -> list[tuple[str, str]]:
        return [(e.parcel_id, e.outcome) for e in self.events if e.kind == "inspect"]

    @property
    def replaced(self) -> list[tuple[str, str]]:
        return [(e.parcel_id, e.outcome) for e in self.events if e.kind == "replace"]

    def to_json(self) -> dict:
        return {
            "record": "epoch",
            "epoch": self.epoch,
            "inspected": [[p, o] for p, o in self.inspected],
            "replaced": [[p, o] for p, o in self.replaced],
            "ledger": self.ledger,
            "metrics": self.metrics,
        }


@dataclass(frozen=True)
class ExperimentLog:
    config: ExperimentConfig
    initial: tuple[str, ...]
    epochs: tuple[EpochLog, ...]
    ledger: CostLedger
    status: str
    model: FittedModel | None = None
    feature_names: tuple[str, ...] = ()

    @property
    def events(self) -> list[Event]:
        return [e for ep in self.epochs for e in ep.events]

    def summary(self) -> dict:
        out = summarize(self.events, self.config.costs)
        out.update({"record": "summary", "status": self.status, "epochs_run": len(self.epochs),
                    "policy": self.config.policy, "seed": self.config.seed})
        if self.config.truncate_visits:
            n_slr, n_hvi = self.config.truncate_visits
            out["truncated"] = summarize(self.events, self.config.costs, n_slr, n_hvi)
            out["truncated"]["limits"] = {"replacement_visits": n_slr, "inspections": n_hvi}
        return out

    def to_ndjson(self) -> str:
        lines = [json.dumps(ep.to_json(), sort_keys=True) for ep in self.epochs]
        lines.append(json.dumps(self.summary(), sort_keys=True))
        return "\n".join(lines) + "\n"

    def ledger_rows(self) -> list[dict]:
        """Cumulative ledger after every action, for plotting."""
        ledger = CostLedger(self.config.costs)
        rows = []
        for ep in self.epochs:
            for e in ep.events:
                _apply_event(ledger, e)
                hr = hit_rate(ledger)
                ec = effective_cost(ledger)
                rows.append({
                    "step": len(rows) + 1, "epoch": ep.epoch, "action": e.kind, "parcel_id": e.parcel_id,
                    "outcome": e.outcome, "cost": e.cost, "n_h": ledger.n_h, "n_r_plus": ledger.n_r_plus,
                    "n_r_minus": ledger.n_r_minus, "total_costs": ledger.total,
                    "hit_rate": "" if hr is None else hr, "effective_cost": "" if ec is None else ec,
                })
        return rows


def _apply_event(ledger: CostLedger, e: Event) -> None:
    if e.kind == "inspect":
        cost = ledger.record_inspection()
    elif e.kind == "replace":
        cost = ledger.record_replacement(e.outcome == "hazardous")
    else:
        raise LedgerError(f"unknown event kind {e.kind!r}")
    if cost != e.cost:
        raise LedgerError(f"event cost {e.cost} disagrees with schedule {cost}")


def replay_ledger(epochs: Iterable[EpochLog], schedule: CostSchedule) -> CostLedger:
    ledger = CostLedger(schedule)
    for ep in epochs:
        for e in ep.events:
            _apply_event(ledger, e)
    return ledger


def summarize(events: Sequence[Event], schedule: CostSchedule, max_replacements: int | None = None,
              max_inspections: int | None = None) -> dict:
    """Ledger statistics over the first ``max_replacements`` replacement visits and
    first ``max_inspections`` inspections (all of them when None)."""
    ledger = CostLedger(schedule)
    n_insp = n_rep = 0
    hvi_hazard = hvi_ok = 0
    for e in events:
        if e.kind == "inspect":
            if max_inspections is not None and n_insp >= max_inspections:
                continue
            n_insp += 1
            hvi_ok += e.outcome != "failed"
            hvi_hazard += e.outcome == "hazardous"
        else:
            if max_replacements is not None and n_rep >= max_replacements:
                continue
            n_rep += 1
        _apply_event(ledger, e)
    return {
        "n_h": ledger.n_h,
        "n_r_plus": ledger.n_r_plus,
        "n_r_minus": ledger.n_r_minus,
        "total_costs": ledger.total,
        "hit_rate": hit_rate(ledger),
        "effective_cost": effective_cost(ledger),
        "hvi_hit_rate": hvi_hazard / hvi_ok if hvi_ok else None,
    }


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

@dataclass
class EngineState:
    """Mutable bookkeeping for one experiment.  Index i refers to ``ids[i]``."""

    ids: tuple[str, ...]
    X: np.ndarray
    precincts: tuple[str, ...]
    feature_names: tuple[str, ...]
    label: np.ndarray  # -1 unknown, else 0/1
    public: np.ndarray  # portion hazard flags, -1 unknown
    private: np.ndarray
    weight: np.ndarray
    inspected: np.ndarray
    replaced: np.ndarray
    ledger: CostLedger
    pending: list[int] = field(default_factory=list)
    epoch: int = 0
    stopped: bool = False
    status: str = "running"
    model: FittedModel | None = None

    def copy(self) -> "EngineState":
        return replace(
            self, label=self.label.copy(), public=self.public.copy(), private=self.private.copy(),
            weight=self.weight.copy(), inspected=self.inspected.copy(), replaced=self.replaced.copy(),
            ledger=replace(self.ledger), pending=list(self.pending))

    @property
    def unknown(self) -> np.ndarray:
        return np.flatnonzero(self.label < 0)

    @property
    def known(self) -> np.ndarray:
        return np.flatnonzero(self.label >= 0)

    def reveal(self, i: int, env: Environment) -> int:
        pub, priv = env.materials(self.ids[i])
        y = derive_label(pub, priv)
        self.label[i] = y
        self.public[i] = int(pub.hazardous)
        self.private[i] = int(priv.hazardous)
        return y


def initial_state(env: Environment, cfg: ExperimentConfig, rng: np.random.Generator) -> EngineState:
    ds = env.dataset
    ids = tuple(sorted(ds.parcels))
    records = [ds.parcels[pid] for pid in ids]
    enc = FeatureEncoder.from_dataset(ds)
    X = enc.transform(records)
    precincts = tuple(str(r.features.get("precinct")) for r in records)
    n = len(ids)
    state = EngineState(
        ids=ids, X=X, precincts=precincts, feature_names=tuple(enc.names),
        label=np.full(n, -1, dtype=np.int64), public=np.full(n, -1, dtype=np.int64),
        private=np.full(n, -1, dtype=np.int64), weight=np.ones(n),
        inspected=np.zeros(n, dtype=bool), replaced=np.zeros(n, dtype=bool),
        ledger=CostLedger(cfg.costs))
    k = min(cfg.initial_labeled, n)
    if k:
        for i in np.sort(rng.choice(n, size=k, replace=False)):
            state.reveal(int(i), env)
    return state


def refresh_model(state: EngineState, cfg: ModelConfig) -> FittedModel:
    known = state.known
    y = state.label[known].astype(float)
    portions = (state.public[known].astype(float), state.private[known].astype(float))
    return fit_statistical_model(
        state.X[known], y, state.weight[known], [state.precincts[i] for i in known], cfg,
        state.feature_names, portions)


def _scores(state: EngineState, model: FittedModel, idx: np.ndarray) -> np.ndarray:
    if len(idx) == 0:
        return np.empty(0)
    return model.score(state.X[idx], [state.precincts[i] for i in idx])


def run_epoch(state: EngineState, env: Environment, cfg: ExperimentConfig,
              rng: np.random.Generator) -> tuple[EngineState, EpochLog]:
    """One decision period: refresh, inspect, refresh, replace."""
    state = state.copy()
    state.epoch += 1
    sched = cfg.costs
    events: list[Event] = []
    if state.stopped:
        raise ConfigError("cannot run an epoch after the experiment stopped")

    def stop(status):
        state.stopped = True
        state.status = status

    # (1) model on everything labeled so far
    model = refresh_model(state, cfg.model)

    # (2) inspections
    policy = cfg.parsed_policy
    d = cfg.inspections_per_epoch
    n_inspected_hazard = 0
    chosen_scores: list[float] = []
    if d > 0 and policy.kind != "none":
        eligible = np.flatnonzero((state.label < 0) & ~state.inspected)
        if len(eligible):
            scores = _scores(state, model, eligible)
            pool = [state.ids[i] for i in eligible]
            batch = policy.select(pool, scores, d, rng)
            pos = {pid: i for pid, i in zip(pool, eligible)}
            for pid, w in zip(batch.ids, batch.weights):
                if not state.ledger.affordable(sched.c_h, cfg.budget):
                    stop("budget")
                    break
                i = pos[pid]
                state.inspected[i] = True
                cost = state.ledger.record_inspection()
                if cfg.failure_rate > 0 and rng.random() < cfg.failure_rate:
                    # cost is paid and no label comes back; the home stays unlabeled and can
                    # still be replaced, but is never dug a second time
                    events.append(Event("inspect", pid, "failed", cost))
                    continue
                y = state.reveal(i, env)
                state.weight[i] = w
                events.append(Event("inspect", pid, "hazardous" if y else "safe", cost))
                if y:
                    state.pending.append(i)
                    n_inspected_hazard += 1

    # (3) refresh with the new labels, (4) replacements
    if not state.stopped:
        if any(e.kind == "inspect" and e.outcome != "failed" for e in events):
            model = refresh_model(state, cfg.model)
        unknown = state.unknown
        b = cfg.replacements_per_epoch
        scores = _scores(state, model, unknown)
        pool = [state.ids[i] for i in unknown]
        pending_ids = [state.ids[i] for i in state.pending]
        chosen, _ = select_replacements(pool, scores, b, pending_ids)
        index = {pid: i for i, pid in enumerate(state.ids)}
        for pid in chosen:
            if cfg.target_successes is not None and state.ledger.n_r_plus >= cfg.target_successes:
                stop("target")
                break
            if not state.ledger.affordable(sched.c_r_plus, cfg.budget):
                stop("budget")
                break
            i = index[pid]
            if state.label[i] < 0:
                y = state.reveal(i, env)
                chosen_scores.append(float(scores[np.searchsorted(unknown, i)]))
            else:
                y = int(state.label[i])
                state.pending.remove(i)
            state.replaced[i] = True
            cost = state.ledger.record_replacement(bool(y))
            events.append(Event("replace", pid, "hazardous" if y else "safe", cost))

    state.model = model
    if not state.stopped:
        if cfg.target_successes is not None and state.ledger.n_r_plus >= cfg.target_successes:
            stop("target")
        elif len(state.unknown) == 0 and not state.pending:
            stop("exhausted")
    n_insp = sum(e.kind == "inspect" for e in events)
    metrics = {
        "n_labeled": int(len(state.known)),
        "n_unlabeled": int(len(state.unknown)),
        "pending": len(state.pending),
        "inspections": n_insp,
        "inspections_hazardous": n_inspected_hazard,
        "mean_score_model_replacements": float(np.mean(chosen_scores)) if chosen_scores else None,
    }
    return state, EpochLog(state.epoch, tuple(events), state.ledger.snapshot(), metrics)


def run_experiment(cfg: ExperimentConfig, env: Environment) -> ExperimentLog:
    """Run epochs until T is reached, the budget binds, the target is met or no homes remain."""
    rng = np.random.default_rng(cfg.seed)
    state = initial_state(env, cfg, rng)
    initial = tuple(state.ids[i] for i in state.known)
    logs = []
    status = "completed"
    if cfg.budget < min(cfg.costs.c_h, cfg.costs.c_r_minus):
        status = "budget"
    else:
        for _ in range(cfg.epochs):
            if len(state.unknown) == 0 and not state.pending:
                status = "exhausted"
                break
            state, ep = run_epoch(state, env, cfg, rng)
            logs.append(ep)
            if state.stopped:
                status = state.status
                break
    final = replay_ledger(logs, cfg.costs)
    if (final.n_h, final.n_r_plus, final.n_r_minus, final.total) != (
            state.ledger.n_h, state.ledger.n_r_plus, state.ledger.n_r_minus, state.ledger.total):
        raise LedgerError("epoch logs do not reproduce the final ledger")
    return ExperimentLog(cfg, initial, tuple(logs), state.ledger, status, state.model, state.feature_names)
