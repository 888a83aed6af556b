"""Parcels, service line observations and city datasets.

Datasets are immutable: every mutating operation returns a new
:class:`CityDataset`.  Missing feature cells are stored as ``None`` and
become ``NaN`` in design matrices, never zero.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from types import MappingProxyType
from typing import IO, Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial.distance import cdist

REQUIRED_COLUMNS = ("parcel_id", "year_built", "value", "lat", "lon", "precinct", "record_label")
NUMERIC_COLUMNS = ("year_built", "value", "lat", "lon")
OBSERVATION_COLUMNS = ("parcel_id", "public_material", "private_material", "source", "epoch")
PRIVATE_FEATURE = "private_inspection"
MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none"})


class DataError(ValueError):
    """Malformed or inconsistent input data."""


class ObservationConflict(DataError):
    def __init__(self, parcel_id: str, previous, new):
        self.parcel_id = parcel_id
        self.previous = previous
        self.new = new
        super().__init__(f"conflicting observations for parcel {parcel_id!r}: {previous} vs {new}")


class PortionMaterial(Enum):
    LEAD = "lead"
    GALVANIZED = "galvanized"
    COPPER = "copper"
    OTHER = "other"
    UNKNOWN = "unknown"

    @classmethod
    def parse(cls, text: str) -> "PortionMaterial":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise DataError(f"unknown material {text!r}") from None

    @property
    def hazardous(self) -> bool:
        return self in (PortionMaterial.LEAD, PortionMaterial.GALVANIZED)


class ObservationSource(Enum):
    HYDROVAC = "hydrovac"
    REPLACEMENT = "replacement"
    PRIVATE_INSPECTION = "privateinspection"
    PILOT = "pilot"

    @classmethod
    def parse(cls, text: str) -> "ObservationSource":
        key = text.strip().lower().replace("_", "").replace(" ", "")
        try:
            return cls(key)
        except ValueError:
            raise DataError(f"unknown observation source {text!r}") from None


def derive_label(public: PortionMaterial, private: PortionMaterial) -> int:
    """1 if either portion of the line is lead or galvanized, else 0."""
    if public is PortionMaterial.UNKNOWN or private is PortionMaterial.UNKNOWN:
        raise DataError("cannot derive a label from an unknown portion")
    return int(public.hazardous or private.hazardous)


@dataclass(frozen=True)
class ServiceLineObservation:
    parcel_id: str
    public_material: PortionMaterial
    private_material: PortionMaterial
    source: ObservationSource
    epoch: int = 0

    def __post_init__(self):
        if self.epoch < 0:
            raise DataError(f"negative epoch for {self.parcel_id!r}")
        if (
            self.source is ObservationSource.PRIVATE_INSPECTION
            and self.public_material is not PortionMaterial.UNKNOWN
        ):
            raise DataError("private inspections cannot observe the public portion")

    @property
    def resolves_label(self) -> bool:
        return (
            self.public_material is not PortionMaterial.UNKNOWN
            and self.private_material is not PortionMaterial.UNKNOWN
        )


@dataclass(frozen=True)
class ParcelRecord:
    parcel_id: str
    features: Mapping[str, object]
    label: int | None = None

    @property
    def known(self) -> bool:
        return self.label is not None


@dataclass(frozen=True)
class CityDataset:
    parcels: Mapping[str, ParcelRecord]
    observations: tuple[ServiceLineObservation, ...] = ()
    precincts: tuple[str, ...] = ()
    feature_names: tuple[str, ...] = REQUIRED_COLUMNS[1:]

    def __post_init__(self):
        object.__setattr__(self, "parcels", MappingProxyType(dict(self.parcels)))

    def __len__(self) -> int:
        return len(self.parcels)

    @property
    def ids(self) -> list[str]:
        return list(self.parcels)

    @property
    def unlabeled(self) -> frozenset[str]:
        return frozenset(pid for pid, p in self.parcels.items() if p.label is None)

    @property
    def labeled(self) -> frozenset[str]:
        return frozenset(pid for pid, p in self.parcels.items() if p.label is not None)

    def labels(self) -> dict[str, int]:
        return {pid: p.label for pid, p in self.parcels.items() if p.label is not None}

    def materials(self) -> dict[str, tuple[PortionMaterial, PortionMaterial]]:
        """Latest fully resolved (public, private) pair per parcel."""
        out = {}
        for obs in self.observations:
            if obs.resolves_label:
                out[obs.parcel_id] = (obs.public_material, obs.private_material)
        return out


def _check_precinct(precinct, precincts):
    if precinct is not None and precincts and precinct not in precincts:
        raise DataError(f"unknown precinct {precinct!r}")


def make_dataset(records: Iterable[ParcelRecord], precincts: Sequence[str] | None = None,
                 feature_names: Sequence[str] | None = None) -> CityDataset:
    parcels: dict[str, ParcelRecord] = {}
    for rec in records:
        if not rec.parcel_id:
            raise DataError("empty parcel id")
        if rec.parcel_id in parcels:
            raise DataError(f"duplicate parcel id {rec.parcel_id!r}")
        parcels[rec.parcel_id] = rec
    if feature_names is None:
        first = next(iter(parcels.values()), None)
        feature_names = tuple(first.features) if first else REQUIRED_COLUMNS[1:]
    names = tuple(feature_names)
    for rec in parcels.values():
        if tuple(rec.features) != names:
            raise DataError(f"parcel {rec.parcel_id!r} has a different feature layout")
    if precincts is None:
        precincts = sorted({str(r.features["precinct"]) for r in parcels.values()
                            if r.features.get("precinct") is not None})
    precincts = tuple(precincts)
    for rec in parcels.values():
        _check_precinct(rec.features.get("precinct"), precincts)
    return CityDataset(parcels=parcels, precincts=precincts, feature_names=names)


def apply_observation(ds: CityDataset, obs: ServiceLineObservation) -> CityDataset:
    return apply_observations(ds, [obs])


def apply_observations(ds: CityDataset, observations: Iterable[ServiceLineObservation]) -> CityDataset:
    """Apply observations in order; parcels whose label resolves move from U to L."""
    parcels = dict(ds.parcels)
    seen = {}
    for prior in ds.observations:
        _merge_seen(seen, prior)
    new_obs = list(ds.observations)
    for obs in observations:
        rec = parcels.get(obs.parcel_id)
        if rec is None:
            raise DataError(f"observation for unknown parcel {obs.parcel_id!r}")
        _merge_seen(seen, obs)
        new_obs.append(obs)
        if obs.source is ObservationSource.PRIVATE_INSPECTION:
            feats = dict(rec.features)
            if PRIVATE_FEATURE in feats:
                feats[PRIVATE_FEATURE] = obs.private_material.value
                parcels[obs.parcel_id] = replace(rec, features=feats)
            continue
        if obs.resolves_label:
            label = derive_label(obs.public_material, obs.private_material)
            parcels[obs.parcel_id] = replace(rec, label=label)
    return replace(ds, parcels=parcels, observations=tuple(new_obs))


def _merge_seen(seen: dict, obs: ServiceLineObservation) -> None:
    prev_pub, prev_priv = seen.get(obs.parcel_id, (PortionMaterial.UNKNOWN, PortionMaterial.UNKNOWN))
    for prev, new in ((prev_pub, obs.public_material), (prev_priv, obs.private_material)):
        if prev is not PortionMaterial.UNKNOWN and new is not PortionMaterial.UNKNOWN and prev is not new:
            raise ObservationConflict(
                obs.parcel_id, (prev_pub.value, prev_priv.value),
                (obs.public_material.value, obs.private_material.value))
    pub = obs.public_material if obs.public_material is not PortionMaterial.UNKNOWN else prev_pub
    priv = obs.private_material if obs.private_material is not PortionMaterial.UNKNOWN else prev_priv
    seen[obs.parcel_id] = (pub, priv)


# ---------------------------------------------------------------------------
# delimited text I/O
# ---------------------------------------------------------------------------

def _parse_cell(text: str, numeric: bool):
    if text.strip().lower() in MISSING_TOKENS:
        return None
    if numeric:
        try:
            return float(text)
        except ValueError:
            raise DataError(f"non-numeric value {text!r}") from None
    try:
        return float(text)
    except ValueError:
        return text.strip()


def ingest_parcels(stream: IO[str], schema: Mapping[str, str] | None = None) -> CityDataset:
    """Read a comma-delimited parcel table.

    ``schema`` maps canonical column names (``parcel_id``, ``year_built``, ...)
    to the header names used in the file.  Columns not named by the schema
    are kept as extra features.
    """
    schema = dict(schema or {})
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("parcel file is empty") from None
    header = [h.strip() for h in header]
    file_to_canon = {v: k for k, v in schema.items()}
    canon = [file_to_canon.get(h, h) for h in header]
    missing = [c for c in REQUIRED_COLUMNS if c not in canon]
    if missing:
        raise DataError(f"parcel header lacks columns: {', '.join(missing)}")
    extras = [c for c in canon if c not in REQUIRED_COLUMNS]
    names = REQUIRED_COLUMNS[1:] + tuple(extras)
    records = []
    seen = set()
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        cells = dict(zip(canon, row))
        pid = cells["parcel_id"].strip()
        if not pid:
            raise DataError(f"line {lineno}: empty parcel id")
        if pid in seen:
            raise DataError(f"line {lineno}: duplicate parcel id {pid!r}")
        seen.add(pid)
        feats = {}
        for name in names:
            if name in NUMERIC_COLUMNS:
                feats[name] = _parse_cell(cells[name], numeric=True)
            elif name in ("precinct", "record_label", PRIVATE_FEATURE):
                raw = cells[name].strip()
                feats[name] = None if raw.lower() in MISSING_TOKENS else raw
            else:
                feats[name] = _parse_cell(cells[name], numeric=False)
        records.append(ParcelRecord(pid, feats))
    return make_dataset(records, feature_names=names)


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_parcels(ds: CityDataset, stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(("parcel_id",) + ds.feature_names)
    for pid, rec in ds.parcels.items():
        writer.writerow([pid] + [_format_cell(rec.features[n]) for n in ds.feature_names])


def ingest_observations(stream: IO[str]) -> list[ServiceLineObservation]:
    reader = csv.DictReader(stream)
    if reader.fieldnames is None or any(c not in reader.fieldnames for c in OBSERVATION_COLUMNS):
        raise DataError(f"observation header must contain {', '.join(OBSERVATION_COLUMNS)}")
    out = []
    for lineno, row in enumerate(reader, start=2):
        try:
            out.append(ServiceLineObservation(
                parcel_id=row["parcel_id"].strip(),
                public_material=PortionMaterial.parse(row["public_material"]),
                private_material=PortionMaterial.parse(row["private_material"]),
                source=ObservationSource.parse(row["source"]),
                epoch=int(row["epoch"]),
            ))
        except (DataError, ValueError, TypeError) as exc:
            raise DataError(f"line {lineno}: {exc}") from None
    return out


def write_observations(observations: Iterable[ServiceLineObservation], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(OBSERVATION_COLUMNS)
    for o in observations:
        writer.writerow([o.parcel_id, o.public_material.value, o.private_material.value,
                         o.source.name.lower(), o.epoch])


def load_dataset(parcels_path, observations_path=None, schema=None) -> CityDataset:
    with open(parcels_path, newline="", encoding="utf-8") as fh:
        ds = ingest_parcels(fh, schema)
    if observations_path:
        with open(observations_path, newline="", encoding="utf-8") as fh:
            ds = apply_observations(ds, ingest_observations(fh))
    return ds


# ---------------------------------------------------------------------------
# design matrices
# ---------------------------------------------------------------------------

CATEGORICAL_FEATURES = ("record_label", PRIVATE_FEATURE)


@dataclass(frozen=True)
class FeatureEncoder:
    """Turns parcel feature mappings into a float matrix.

    Numeric features pass through; categorical ones are one-hot encoded over
    the vocabulary seen at construction.  A missing cell is NaN in every
    column it owns.
    """

    numeric: tuple[str, ...]
    categorical: tuple[tuple[str, tuple[str, ...]], ...]

    @classmethod
    def from_dataset(cls, ds: CityDataset, exclude: Sequence[str] = ("precinct",)) -> "FeatureEncoder":
        numeric, categorical = [], []
        recs = list(ds.parcels.values())
        for name in ds.feature_names:
            if name in exclude:
                continue
            values = [r.features[name] for r in recs if r.features[name] is not None]
            if name in CATEGORICAL_FEATURES or any(isinstance(v, str) for v in values):
                vocab = tuple(sorted({str(v).lower() for v in values}))
                categorical.append((name, vocab))
            else:
                numeric.append(name)
        return cls(tuple(numeric), tuple(categorical))

    @property
    def names(self) -> list[str]:
        out = list(self.numeric)
        for name, vocab in self.categorical:
            out.extend(f"{name}={v}" for v in vocab)
        return out

    def transform(self, records: Sequence[ParcelRecord]) -> np.ndarray:
        n = len(records)
        X = np.empty((n, len(self.names)))
        col = 0
        for name in self.numeric:
            X[:, col] = [np.nan if r.features[name] is None else float(r.features[name]) for r in records]
            col += 1
        for name, vocab in self.categorical:
            index = {v: j for j, v in enumerate(vocab)}
            block = np.zeros((n, len(vocab)))
            for i, r in enumerate(records):
                v = r.features[name]
                if v is None:
                    block[i, :] = np.nan
                elif str(v).lower() in index:
                    block[i, index[str(v).lower()]] = 1.0
            X[:, col:col + len(vocab)] = block
            col += len(vocab)
        return X


# ---------------------------------------------------------------------------
# synthetic cities
# ---------------------------------------------------------------------------

HAZARD_RECORDS = ("lead", "copper/lead", "galvanized")
SAFE_RECORDS = ("copper",)


@dataclass(frozen=True)
class SyntheticCityConfig:
    n_parcels: int = 6506
    prevalence: float = 0.7
    n_precincts: int = 36
    precinct_effect_scale: float = 0.5
    coefficients: Mapping[str, float] = field(default_factory=lambda: {
        "year_built": -2.0, "value": -1.0, "lat": 1.0, "lon": -1.0})
    record_noise: float = 0.35
    missing_rate: float = 0.02
    private_inspection_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.prevalence < 1.0:
            raise DataError(f"prevalence must lie strictly inside (0, 1), got {self.prevalence}")
        if self.n_parcels < 1:
            raise DataError("n_parcels must be at least 1")
        if self.n_precincts < 1:
            raise DataError("n_precincts must be at least 1")
        if not 0.0 <= self.record_noise <= 1.0 or not 0.0 <= self.missing_rate < 1.0:
            raise DataError("noise and missing rates must be probabilities")
        unknown = set(self.coefficients) - set(NUMERIC_COLUMNS)
        if unknown:
            raise DataError(f"no signal can be planted on {sorted(unknown)}")

    @classmethod
    def from_json(cls, doc: Mapping | str) -> "SyntheticCityConfig":
        if isinstance(doc, str):
            doc = json.loads(doc)
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise DataError(f"unknown synthetic city fields: {sorted(extra)}")
        return cls(**doc)

    def to_json(self) -> dict:
        return {k: (dict(v) if k == "coefficients" else v) for k, v in self.__dict__.items()}


@dataclass(frozen=True)
class SyntheticCity:
    """A generated city: the public dataset plus its hidden truth."""

    dataset: CityDataset
    truth: Mapping[str, tuple[PortionMaterial, PortionMaterial]]
    hazard_probability: Mapping[str, float]

    def label(self, parcel_id: str) -> int:
        return derive_label(*self.truth[parcel_id])


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(z, dtype=float)))


def _solve_intercept(score: np.ndarray, prevalence: float) -> float:
    lo, hi = -60.0, 60.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _sigmoid(score + mid).mean() < prevalence:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _hazard_materials(rng, n):
    kinds = [
        (PortionMaterial.LEAD, PortionMaterial.COPPER),
        (PortionMaterial.LEAD, PortionMaterial.LEAD),
        (PortionMaterial.GALVANIZED, PortionMaterial.COPPER),
        (PortionMaterial.COPPER, PortionMaterial.GALVANIZED),
        (PortionMaterial.LEAD, PortionMaterial.GALVANIZED),
    ]
    idx = rng.choice(len(kinds), size=n, p=[0.55, 0.15, 0.1, 0.1, 0.1])
    return [kinds[i] for i in idx]


def _safe_materials(rng, n):
    kinds = [(PortionMaterial.COPPER, PortionMaterial.COPPER), (PortionMaterial.COPPER, PortionMaterial.OTHER)]
    idx = rng.choice(len(kinds), size=n, p=[0.9, 0.1])
    return [kinds[i] for i in idx]


def generate_synthetic_city(cfg: SyntheticCityConfig, id_prefix: str = "P") -> SyntheticCity:
    """Draw a city whose hazard probability is logistic in its features.

    Homes sit on the unit square split into a grid of precincts.  Older and
    cheaper homes are riskier; each precinct adds a random log-odds effect.
    The intercept is solved so the mean hazard probability equals the
    configured prevalence.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_parcels
    lat = rng.uniform(43.0, 43.1, n)
    lon = rng.uniform(-83.75, -83.6, n)
    year = np.round(rng.normal(1945.0, 18.0, n)).clip(1880, 2015)
    log_value = 10.3 + 0.012 * (year - 1945.0) + rng.normal(0.0, 0.45, n)
    value = np.round(np.exp(log_value), -2)

    side = max(1, int(math.ceil(math.sqrt(cfg.n_precincts))))
    gx = np.minimum(((lon + 83.75) / 0.15 * side).astype(int), side - 1)
    gy = np.minimum(((lat - 43.0) / 0.1 * side).astype(int), side - 1)
    cell = (gy * side + gx) % cfg.n_precincts
    precinct_names = [f"PR{j:03d}" for j in range(cfg.n_precincts)]
    effects = rng.normal(0.0, cfg.precinct_effect_scale, cfg.n_precincts)

    raw = {"year_built": year, "value": np.log(value), "lat": lat, "lon": lon}
    score = np.zeros(n)
    for name, coef in cfg.coefficients.items():
        col = raw[name]
        sd = col.std()
        if sd > 0:
            score += coef * (col - col.mean()) / sd
    score += effects[cell]
    prob = _sigmoid(score + _solve_intercept(score, cfg.prevalence))
    y = (rng.random(n) < prob).astype(int)

    haz = iter(_hazard_materials(rng, int(y.sum())))
    safe = iter(_safe_materials(rng, int(n - y.sum())))
    materials = [next(haz) if yi else next(safe) for yi in y]

    flip = rng.random(n) < cfg.record_noise
    rec_haz = rng.choice(HAZARD_RECORDS, size=n, p=[0.5, 0.35, 0.15])
    records = np.where((y == 1) ^ flip, rec_haz, SAFE_RECORDS[0])

    miss_year = rng.random(n) < cfg.missing_rate
    miss_value = rng.random(n) < cfg.missing_rate
    miss_record = rng.random(n) < cfg.missing_rate
    private_seen = rng.random(n) < cfg.private_inspection_rate

    width = max(1, len(str(n - 1)))
    parcels = []
    truth = {}
    hazard_probability = {}
    for i in range(n):
        pid = f"{id_prefix}{i:0{width}d}"
        feats = {
            "year_built": None if miss_year[i] else float(year[i]),
            "value": None if miss_value[i] else float(value[i]),
            "lat": float(round(lat[i], 6)),
            "lon": float(round(lon[i], 6)),
            "precinct": precinct_names[cell[i]],
            "record_label": None if miss_record[i] else str(records[i]),
            PRIVATE_FEATURE: materials[i][1].value if private_seen[i] else None,
        }
        parcels.append(ParcelRecord(pid, feats))
        truth[pid] = materials[i]
        hazard_probability[pid] = float(prob[i])
    names = REQUIRED_COLUMNS[1:] + (PRIVATE_FEATURE,)
    ds = make_dataset(parcels, precincts=precinct_names, feature_names=names)
    return SyntheticCity(ds, MappingProxyType(truth), MappingProxyType(hazard_probability))


def reveal_all(city: SyntheticCity, source: ObservationSource = ObservationSource.PILOT,
               epoch: int = 0) -> CityDataset:
    """The fully labeled version of a synthetic city (a backtest template)."""
    obs = [ServiceLineObservation(pid, pub, priv, source, epoch) for pid, (pub, priv) in city.truth.items()]
    return apply_observations(city.dataset, obs)


# ---------------------------------------------------------------------------
# nearest-neighbour label propagation
# ---------------------------------------------------------------------------

def _knn_matrix(query: Sequence[ParcelRecord], ref: Sequence[ParcelRecord], names: Sequence[str]):
    """Distance coordinates: z-scored numerics (fit on ``ref``) and one-hot categoricals.

    Missing numerics sit at the reference mean; a missing category is all zeros.
    """
    numeric, categorical = [], []
    for name in names:
        if name == "precinct":
            continue
        values = [r.features.get(name) for r in ref if r.features.get(name) is not None]
        if name in CATEGORICAL_FEATURES or any(isinstance(v, str) for v in values):
            categorical.append(name)
        else:
            numeric.append(name)
    if "lat" not in numeric or "lon" not in numeric:
        raise DataError("nearest-neighbour distance requires lat/lon coordinates")

    def column(recs, name):
        return np.array([np.nan if r.features.get(name) is None else float(r.features[name]) for r in recs])

    cols_ref, cols_q = [], []
    for name in numeric:
        a, b = column(ref, name), column(query, name)
        ok = np.isfinite(a)
        mu = a[ok].mean() if ok.any() else 0.0
        sd = a[ok].std() if ok.any() else 0.0
        sd = sd if sd > 0 else 1.0
        cols_ref.append(np.nan_to_num((a - mu) / sd, nan=0.0))
        cols_q.append(np.nan_to_num((b - mu) / sd, nan=0.0))
    for name in categorical:
        vocab = sorted({str(r.features[name]).lower() for r in ref if r.features.get(name) is not None})
        for v in vocab:
            cols_ref.append(np.array([float(str(r.features.get(name)).lower() == v) for r in ref]))
            cols_q.append(np.array([float(str(r.features.get(name)).lower() == v) for r in query]))
    return np.column_stack(cols_q), np.column_stack(cols_ref)


def knn_probabilities(query: np.ndarray, ref: np.ndarray, ref_labels: np.ndarray, k: int,
                      chunk: int = 1024) -> np.ndarray:
    """Fraction of the k nearest reference rows with label 1.

    Reference rows must already be ordered by ascending parcel id: distance
    ties at rank k are resolved in favour of the lower index.
    """
    n_ref = ref.shape[0]
    if k < 1 or k > n_ref:
        raise DataError(f"k={k} needs between 1 and {n_ref} labeled parcels")
    ref_labels = np.asarray(ref_labels, dtype=float)
    out = np.empty(query.shape[0])
    for start in range(0, query.shape[0], chunk):
        d = cdist(query[start:start + chunk], ref, metric="sqeuclidean")
        kth = np.partition(d, k - 1, axis=1)[:, k - 1:k]
        below = d < kth
        tie = d == kth
        need = k - below.sum(axis=1, keepdims=True)
        chosen = below | (tie & (np.cumsum(tie, axis=1) <= need))
        out[start:start + chunk] = (chosen * ref_labels).sum(axis=1) / k
    return out


def knn_propagate_labels(labeled: CityDataset, unlabeled: Sequence[ParcelRecord], k: int,
                         seed: int) -> tuple[list[ParcelRecord], np.ndarray]:
    """Assign Bernoulli labels to ``unlabeled`` from their k nearest labeled parcels.

    Returns the labeled records and the per-parcel probabilities used.
    """
    ref = sorted((labeled.parcels[pid] for pid in labeled.labeled), key=lambda r: r.parcel_id)
    if k > len(ref):
        raise DataError(f"k={k} exceeds the {len(ref)} labeled parcels")
    names = labeled.feature_names
    Xq, Xr = _knn_matrix(list(unlabeled), ref, names)
    y = np.array([r.label for r in ref])
    p = knn_probabilities(Xq, Xr, y, k)
    rng = np.random.default_rng(seed)
    draws = (rng.random(len(p)) < p).astype(int)
    out = [replace(r, label=int(d)) for r, d in zip(unlabeled, draws)]
    return out, p


# ---------------------------------------------------------------------------
# records vs verified materials
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Crosstab:
    counts: Mapping[tuple[str, str], int]

    @property
    def rows(self) -> list[str]:
        return sorted({r for r, _ in self.counts})

    @property
    def columns(self) -> list[str]:
        return sorted({c for _, c in self.counts})

    def row_total(self, row: str) -> int:
        return sum(v for (r, _), v in self.counts.items() if r == row)

    def column_total(self, col: str) -> int:
        return sum(v for (_, c), v in self.counts.items() if c == col)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = self.columns
        w.writerow(["record"] + cols + ["total"])
        for r in self.rows:
            w.writerow([r] + [self.counts.get((r, c), 0) for c in cols] + [self.row_total(r)])
        w.writerow(["total"] + [self.column_total(c) for c in cols] + [self.total])
        return buf.getvalue()


def records_crosstab(ds: CityDataset) -> Crosstab:
    """Count verified parcels by raw city-record string and verified material pair.

    Dual records such as "Copper/Lead" stay opaque categories.
    """
    counts: Counter = Counter()
    for pid, (pub, priv) in ds.materials().items():
        record = ds.parcels[pid].features.get("record_label")
        if record is None:
            continue
        counts[(str(record), f"{pub.value}-{priv.value}")] += 1
    return Crosstab(dict(counts))


def simulated_city(template: CityDataset, targets: CityDataset, k: int = 10, seed: int = 0) -> SyntheticCity:
    """A generative city: ``targets`` parcels labeled by nearest-neighbour
    propagation from the verified ``template`` homes.

    Materials consistent with each sampled label are drawn from the same
    mix the synthetic generator uses.
    """
    records = [targets.parcels[pid] for pid in sorted(targets.parcels)]
    labeled, prob = knn_propagate_labels(template, records, k, seed)
    rng = np.random.default_rng([seed, 1])
    y = np.array([r.label for r in labeled])
    haz = iter(_hazard_materials(rng, int(y.sum())))
    safe = iter(_safe_materials(rng, int(len(y) - y.sum())))
    truth = {r.parcel_id: next(haz) if r.label else next(safe) for r in labeled}
    hazard_probability = {r.parcel_id: float(p) for r, p in zip(labeled, prob)}
    return SyntheticCity(targets, MappingProxyType(truth), MappingProxyType(hazard_probability))
