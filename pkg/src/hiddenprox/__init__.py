"""Average treatment effects on a hidden binary outcome observed only
through three conditionally independent proxies.

The package covers simulation designs with known truth, recovery of the
latent measurement law (spectral for binary proxies, EM for Gaussian ones),
the nuisance models and proxy weights, influence-function estimators with
cross-fitting, and a replication engine for simulation studies.
"""
from .core import (GLOBAL, EstimateResult, EstimatorKind, FullData, FullRecord, LatentLaw,
                   ObservedData, ObservedRecord, Stratum, attach_outcome, project_observed)
from .dgp import DgpSpec, population_tensor, read_csv, simulate, true_targets, write_csv
from .estimators import (CrossfitConfig, ProximalATE, estimate_ate, phi_full, phi_obs,
                         solve_psi)
from .exceptions import *  # noqa: F401,F403
from .montecarlo import StudyConfig, robustness_study, run_study
from .nuisance import (MisspecSpec, NuisanceSet, fit_nuisances, misspecify, omega,
                       omega_matrix, true_nuisances)
from .recovery import (EmConfig, GaussianLatentClassModel, SpectralLatentClassModel,
                       align_labels, build_tensor, em_fit_mixture, fit_outcome_given_mixture,
                       recover_stratified, spectral_recover)

__version__ = "0.1.0"
