"""Simulate and evaluate inspect-then-replace programs for hazardous water service lines."""

from .classifier import BoostConfig, HazardClassifier, fit, fit_logistic_baseline
from .data_model import (
    CityDataset,
    DataError,
    ObservationSource,
    ParcelRecord,
    PortionMaterial,
    ServiceLineObservation,
    SyntheticCityConfig,
    generate_synthetic_city,
)
from .decision import IwalConfig, parse_policy
from .engine import (
    Backtest,
    ConfigError,
    CostLedger,
    CostSchedule,
    ExperimentConfig,
    Generative,
    ModelConfig,
    run_experiment,
)
from .metrics import auroc, prevalence_interval, roc_points
from .spatial_bayes import fit_hyperparameters, precinct_stats, recalibrate

__version__ = "0.1.0"

__all__ = [
    "Backtest", "BoostConfig", "CityDataset", "ConfigError", "CostLedger", "CostSchedule", "DataError",
    "ExperimentConfig", "Generative", "HazardClassifier", "IwalConfig", "ModelConfig", "ObservationSource",
    "ParcelRecord", "PortionMaterial", "ServiceLineObservation", "SyntheticCityConfig", "auroc", "fit",
    "fit_hyperparameters", "fit_logistic_baseline", "generate_synthetic_city", "parse_policy",
    "precinct_stats", "prevalence_interval", "recalibrate", "roc_points", "run_experiment",
]
