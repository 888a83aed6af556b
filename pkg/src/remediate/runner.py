"""Config-driven workflows behind the command line.

A run document is one JSON object with optional sections ``city``,
``data``, ``simulation``, ``experiment``, ``evaluation``, ``report`` and
``baseline`` (the named comparison arm; ``null`` disables it).
Every random choice derives from the single top-level seed.
"""

from __future__ import annotations

import copy
import json
import logging
from io import StringIO
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .classifier import feature_importance
from .data_model import (
    CityDataset,
    DataError,
    FeatureEncoder,
    ObservationSource,
    ServiceLineObservation,
    SyntheticCity,
    SyntheticCityConfig,
    apply_observations,
    generate_synthetic_city,
    load_dataset,
    records_crosstab,
    reveal_all,
    simulated_city,
    write_observations,
    write_parcels,
)
from .engine import (
    Backtest,
    ConfigError,
    Environment,
    ExperimentConfig,
    ExperimentLog,
    Generative,
    ModelConfig,
    fit_statistical_model,
    run_experiment,
)
from .metrics import (
    CurveSeries,
    auroc,
    confusion_at_threshold,
    holdout_split,
    learning_curve,
    prevalence_interval,
    reliability_curve,
    roc_points,
    temporal_learning_curve,
)

log = logging.getLogger(__name__)

DEFAULT_BASELINE = {
    "name": "records-greedy",
    "policy": "none",
    "inspections_per_epoch": 0,
    "model": {"features": ["record_label"], "spatial_lambda": 0.0},
}


def derive_seed(seed: int, *path: int) -> int:
    """Independent child seed for (seed, path...)."""
    return int(np.random.SeedSequence([seed, *path]).generate_state(1)[0])


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc


def _section(doc: Mapping, name: str) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return copy.deepcopy(sec)


def city_config(doc: Mapping, seed: int, **overrides) -> SyntheticCityConfig:
    sec = _section(doc, "city")
    sec.update(overrides)
    sec["seed"] = seed
    try:
        return SyntheticCityConfig.from_json(sec)
    except (TypeError, DataError) as exc:
        raise ConfigError(f"city config: {exc}") from None


def experiment_config(doc: Mapping, seed: int, truncate=None, **overrides) -> ExperimentConfig:
    sec = _section(doc, "experiment")
    for key, val in overrides.items():
        if key == "model":
            merged = dict(sec.get("model", {}))
            merged.update(val)
            sec["model"] = merged
        else:
            sec[key] = val
    sec["seed"] = seed
    if truncate is not None:
        sec["truncate_visits"] = list(truncate)
    return ExperimentConfig.from_json(sec)


def labeled_dataset(doc: Mapping, seed: int) -> CityDataset:
    """Verified dataset from ``data`` file paths, else a fully revealed synthetic city."""
    data = _section(doc, "data")
    if data:
        if "parcels" not in data:
            raise ConfigError("data section needs a 'parcels' path")
        try:
            return load_dataset(data["parcels"], data.get("observations"), data.get("schema"))
        except FileNotFoundError as exc:
            raise DataError(str(exc)) from None
    return with_arrival_epochs(reveal_all(generate_synthetic_city(city_config(doc, seed))),
                               _section(doc, "city_arrivals").get("periods", 20), seed)


def with_arrival_epochs(ds: CityDataset, periods: int, seed: int) -> CityDataset:
    """Restamp verification epochs as if homes were visited in random order over ``periods``."""
    rng = np.random.default_rng(derive_seed(seed, 7))
    materials = ds.materials()
    ids = sorted(materials)
    epochs = np.sort(rng.integers(0, periods, size=len(ids)))
    order = rng.permutation(len(ids))
    obs = [ServiceLineObservation(ids[j], *materials[ids[j]], ObservationSource.REPLACEMENT, int(e))
           for j, e in zip(order, epochs)]
    bare = CityDataset(parcels={pid: replace(r, label=None) for pid, r in ds.parcels.items()},
                       precincts=ds.precincts, feature_names=ds.feature_names)
    return apply_observations(bare, obs)


def design(ds: CityDataset):
    ids = sorted(ds.parcels)
    records = [ds.parcels[pid] for pid in ids]
    enc = FeatureEncoder.from_dataset(ds)
    X = enc.transform(records)
    labels = np.array([-1 if r.label is None else r.label for r in records])
    precincts = [str(r.features.get("precinct")) for r in records]
    return ids, X, labels, precincts, enc.names


# ---------------------------------------------------------------------------
# bundles
# ---------------------------------------------------------------------------

@dataclass
class Bundle:
    """Everything a command writes: a summary, tables and JSON documents."""

    summary: dict
    tables: dict[str, list[dict]] = field(default_factory=dict)
    documents: dict[str, dict] = field(default_factory=dict)
    texts: dict[str, str] = field(default_factory=dict)


def curve_rows(curve: CurveSeries) -> list[dict]:
    return curve.rows()


def generate(doc: Mapping, seed: int) -> Bundle:
    cfg = city_config(doc, seed)
    city = generate_synthetic_city(cfg)
    full = with_arrival_epochs(reveal_all(city), _section(doc, "city_arrivals").get("periods", 20), seed)
    parcels, observations = StringIO(), StringIO()
    write_parcels(city.dataset, parcels)
    write_observations(full.observations, observations)
    n_haz = sum(city.label(pid) for pid in city.truth)
    summary = {
        "command": "generate",
        "seed": seed,
        "n_parcels": len(city.dataset),
        "n_hazardous": n_haz,
        "prevalence": n_haz / len(city.dataset),
        "config": cfg.to_json(),
    }
    crosstab = records_crosstab(full)
    return Bundle(summary, texts={"parcels.csv": parcels.getvalue(), "observations.csv": observations.getvalue(),
                                  "crosstab.csv": crosstab.to_csv()})


def evaluate(doc: Mapping, seed: int) -> Bundle:
    ev = _section(doc, "evaluation")
    ds = labeled_dataset(doc, seed)
    ids, X, labels, precincts, names = design(ds)
    known = np.flatnonzero(labels >= 0)
    if len(known) < 4:
        raise DataError("evaluation needs at least four verified homes")
    model_cfg = ModelConfig.from_json(_section(doc, "experiment").get("model", {}))
    Xk, yk = X[known], labels[known]
    pk = [precincts[i] for i in known]
    tr, te = holdout_split(len(known), ev.get("test_fraction", 0.25), derive_seed(seed, 1))
    summary = {"command": "evaluate", "seed": seed, "n_labeled": int(len(known)),
               "n_test": int(len(te)), "models": {}}
    tables = {}
    for label, cfg in (("boosted", model_cfg), ("logistic", replace(model_cfg, kind="logistic"))):
        fitted = fit_statistical_model(Xk[tr], yk[tr].astype(float), np.ones(len(tr)),
                                       [pk[i] for i in tr], cfg, names)
        s = fitted.score(Xk[te], [pk[i] for i in te])
        entry = {"auroc": auroc(s, yk[te])}
        if entry["auroc"] is not None:
            tables[f"curves/roc_{label}"] = curve_rows(roc_points(s, yk[te]))
        tables[f"curves/reliability_{label}"] = curve_rows(reliability_curve(s, yk[te], ev.get("n_bins", 10)))
        conf = confusion_at_threshold(s, yk[te], top_fraction=ev.get("top_fraction", float(yk.mean())))
        entry["confusion"] = {"tp": conf.tp, "fp": conf.fp, "tn": conf.tn, "fn": conf.fn,
                              "accuracy": conf.accuracy, "fpr": conf.fpr, "fnr": conf.fnr}
        summary["models"][label] = entry
    lc = learning_curve(Xk, yk, model_cfg, ev.get("fractions", [0.1, 0.25, 0.5, 1.0]),
                        ev.get("replications", 3), derive_seed(seed, 2), ev.get("test_fraction", 0.25),
                        names, pk)
    tables["curves/learning_curve"] = curve_rows(lc)
    epoch_of = {o.parcel_id: o.epoch for o in ds.observations if o.resolves_label}
    ep = np.array([epoch_of.get(ids[i], 0) for i in known])
    if len(set(ep)) > 1:
        tc = temporal_learning_curve(Xk, yk, ep, model_cfg, ev.get("period", 1), names, pk)
        tables["curves/temporal_learning_curve"] = curve_rows(tc)
    final = fit_statistical_model(Xk, yk.astype(float), np.ones(len(known)), pk, model_cfg, names)
    if final.classifiers and hasattr(final.classifiers[0], "trees"):
        summary["feature_importance"] = feature_importance(final.classifiers[0])
    if ev.get("n_bootstrap"):
        # hide the holdout labels so the interval has something to estimate
        masked = labels.copy()
        masked[known[te]] = -1
        summary["hidden_hazardous"] = int(labels[known[te]].sum())
        summary["true_hazardous"] = int(labels[known].sum()) if len(known) == len(labels) else None
        interval = prevalence_interval(X, masked, model_cfg, ev["n_bootstrap"], ev.get("confidence", 0.95),
                                       derive_seed(seed, 3), names, precincts, ev.get("stratified", False))
        summary["prevalence_interval"] = {"low": interval.low, "point": interval.point, "high": interval.high,
                                          "confidence": interval.confidence}
    return Bundle(summary, tables, {"model.json": final.to_json(names)})


def baseline_spec(doc: Mapping) -> dict | None:
    """The named comparison arm, or None when the config sets ``"baseline": null``."""
    if "baseline" in doc and doc["baseline"] is None:
        return None
    spec = dict(DEFAULT_BASELINE)
    spec.update(doc.get("baseline") or {})
    return spec


def _baseline_savings(doc: Mapping, env: Environment, seed: int, truncate, main: dict) -> dict:
    spec = baseline_spec(doc)
    if spec is None:
        return {}
    over = {k: v for k, v in spec.items() if k != "name"}
    base = run_experiment(experiment_config(doc, derive_seed(seed, 4), truncate, **over), env).summary()
    ours, theirs = main.get("truncated", main), base.get("truncated", base)
    out = {"baseline": {"name": spec["name"], "hit_rate": theirs["hit_rate"],
                        "effective_cost": theirs["effective_cost"], "policy": base["policy"]}}
    if ours["effective_cost"] and theirs["effective_cost"]:
        out["savings_per_success"] = theirs["effective_cost"] - ours["effective_cost"]
        out["savings_fraction"] = out["savings_per_success"] / theirs["effective_cost"]
    return out


def _experiment_bundle(log_: ExperimentLog, env: Environment, command: str, extra: dict) -> Bundle:
    summary = log_.summary()
    summary.update({"command": command, "n_homes": len(env.dataset), "n_hazardous": env.n_hazardous})
    summary.update(extra)
    summary["config"] = log_.config.to_json()
    docs = {}
    if log_.model is not None:
        docs["model.json"] = log_.model.to_json(log_.feature_names)
    return Bundle(summary, {"ledger": log_.ledger_rows()}, docs, {"epochs.ndjson": log_.to_ndjson()})


def backtest(doc: Mapping, seed: int, truncate=None) -> Bundle:
    env = Backtest(labeled_dataset(doc, seed))
    return _run_with_baseline(doc, env, seed, truncate, "backtest")


def _run_with_baseline(doc, env, seed, truncate, command):
    cfg = experiment_config(doc, derive_seed(seed, 4), truncate)
    out = run_experiment(cfg, env)
    extra = {"seed": seed, **_baseline_savings(doc, env, seed, truncate, out.summary())}
    return _experiment_bundle(out, env, command, extra)


def simulation_city(doc: Mapping, seed: int) -> SyntheticCity:
    """Target parcels whose hidden labels come from nearest-neighbour propagation."""
    sim = _section(doc, "simulation")
    n_homes = sim.get("n_homes", 48000)
    template = labeled_dataset(doc, seed)
    targets = generate_synthetic_city(
        city_config(doc, derive_seed(seed, 5), n_parcels=n_homes), id_prefix="S").dataset
    return simulated_city(template, targets, sim.get("k", 5), derive_seed(seed, 6))


def simulation_environment(doc: Mapping, seed: int) -> Generative:
    return Generative(simulation_city(doc, seed))


def simulate(doc: Mapping, seed: int, truncate=None) -> Bundle:
    env = simulation_environment(doc, seed)
    return _run_with_baseline(doc, env, seed, truncate, "simulate")


def report(doc: Mapping, seed: int, truncate=None) -> Bundle:
    """Compare policies on replicated backtests against a named baseline."""
    rep = _section(doc, "report")
    policies = rep.get("policies", ["iwal:0.7", "egreedy:0.1", "uniform", "greedy"])
    baseline = baseline_spec(doc) or dict(DEFAULT_BASELINE)
    replications = int(rep.get("replications", 3))
    runs: dict[str, list[dict]] = {}
    hit_curves: dict[str, list[list[float]]] = {}
    model_doc = None
    arms = [(p, {"policy": p}) for p in policies]
    base_over = {k: v for k, v in baseline.items() if k != "name"}
    arms.append((baseline["name"], base_over))
    for r in range(replications):
        rseed = derive_seed(seed, 100, r)
        env = Backtest(labeled_dataset(doc, rseed))
        for name, over in arms:
            cfg = experiment_config(doc, derive_seed(rseed, 4), truncate, **over)
            out = run_experiment(cfg, env)
            s = out.summary()
            runs.setdefault(name, []).append(s.get("truncated", s))
            hits = [1.0 if e.outcome == "hazardous" else 0.0 for e in out.events if e.kind == "replace"]
            hit_curves.setdefault(name, []).append(np.cumsum(hits) / np.arange(1, len(hits) + 1))
            if model_doc is None and out.model is not None:
                model_doc = out.model.to_json(out.feature_names)
    base_cost = _mean([s["effective_cost"] for s in runs[baseline["name"]]])
    summary = {"command": "report", "seed": seed, "replications": replications, "baseline": baseline["name"],
               "policies": {}}
    rows = []
    for name, lst in runs.items():
        hr = _mean([s["hit_rate"] for s in lst])
        ec = _mean([s["effective_cost"] for s in lst])
        entry = {"hit_rate": hr, "effective_cost": ec, "hvi_hit_rate": _mean([s["hvi_hit_rate"] for s in lst]),
                 "n_h": _mean([s["n_h"] for s in lst]), "n_r_plus": _mean([s["n_r_plus"] for s in lst]),
                 "n_r_minus": _mean([s["n_r_minus"] for s in lst])}
        if base_cost and ec:
            entry["savings_per_success"] = base_cost - ec
            entry["savings_fraction"] = (base_cost - ec) / base_cost
        summary["policies"][name] = entry
        for r, s in enumerate(lst):
            rows.append({"policy": name, "replication": r, **{k: s[k] for k in
                         ("n_h", "n_r_plus", "n_r_minus", "total_costs", "hit_rate", "effective_cost")}})
    tables = {"ledger": rows}
    for name, curves in hit_curves.items():
        n = min(len(c) for c in curves) if curves else 0
        if n:
            mean = np.mean([c[:n] for c in curves], axis=0)
            tables[f"curves/hit_rate_{_slug(name)}"] = [{"x": i + 1, "y": float(v)} for i, v in enumerate(mean)]
    docs = {"model.json": model_doc} if model_doc is not None else {}
    return Bundle(summary, tables, docs)


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


# ---------------------------------------------------------------------------
# writing
# ---------------------------------------------------------------------------

def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def dumps(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2, default=_json_default, allow_nan=False) + "\n"


def write_bundle(bundle: Bundle, out: Path, fmt: str = "csv") -> list[Path]:
    import csv

    out = Path(out)
    written = []
    out.mkdir(parents=True, exist_ok=True)

    def target(name):
        p = out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        written.append(p)
        return p

    target("summary.json").write_text(dumps(bundle.summary), encoding="utf-8")
    for name, rows in sorted(bundle.tables.items()):
        if fmt == "json":
            target(f"{name}.json").write_text(dumps(rows), encoding="utf-8")
            continue
        with open(target(f"{name}.csv"), "w", newline="", encoding="utf-8") as fh:
            cols = list(rows[0]) if rows else ["x", "y"]
            w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
            w.writeheader()
            for row in rows:
                w.writerow({k: ("" if v is None else v) for k, v in row.items()})
    for name, doc in sorted(bundle.documents.items()):
        target(name).write_text(dumps(doc), encoding="utf-8")
    for name, text in sorted(bundle.texts.items()):
        target(name).write_text(text, encoding="utf-8")
    return written
