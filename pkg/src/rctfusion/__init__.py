"""Causal data fusion of randomized trials with real-world data.

Synthetic data generation with explicit hidden confounding, a catalog of
RCT+RWD fusion estimators, and a Monte Carlo benchmark of their risk-reward
trade-off.
"""

from .config import ExperimentGrid, MsmCoeffs, RwdPsCoeffs, ScenarioConfig
from .estimate import AteEstimate, StrataEstimates, aipw, bootstrap_ci, stratified_aipw
from .fusion import FusionDiagnostics, FusionHyper
from .nuisance import LearnerSpec, NuisanceFit, fit_outcome, fit_propensity
from .synthgen import Dataset, generate_dataset, generate_pair, true_ate

__all__ = [
    "AteEstimate",
    "Dataset",
    "ExperimentGrid",
    "FusionDiagnostics",
    "FusionHyper",
    "LearnerSpec",
    "MsmCoeffs",
    "NuisanceFit",
    "RwdPsCoeffs",
    "ScenarioConfig",
    "StrataEstimates",
    "aipw",
    "bootstrap_ci",
    "fit_outcome",
    "fit_propensity",
    "generate_dataset",
    "generate_pair",
    "stratified_aipw",
    "true_ate",
]

__version__ = "0.1.0"
