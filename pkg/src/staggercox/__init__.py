"""Heterogeneous treatment effects on survival under staggered adoption.

The package fits time-varying Cox models in which a unit's treatment switches
on at its adoption time, and estimates the heterogeneous log hazard ratio
``tau(x)`` with a single lasso fit (S-Lasso) or with the cross-fitted,
orthogonalised TV-CSL estimator.
"""

from .core import (Dataset, EpisodeRow, EpisodeTable, FitResult, SubjectRecord,
                   expand_dataset, expand_to_episodes, read_dataset_csv, risk_set,
                   write_dataset_csv)
from .coxtv import (PartialLikelihoodProblem, SummedProblem, TimeIndexedProblem,
                    gradient, hessian, log_partial_likelihood, newton_fit)
from .estimators import (CrossFitPlan, HteModel, Nuisances, make_crossfit_plan,
                         predict_hte, s_lasso_fit, tvcsl_fit)
from .penalized import (COMPLEX, LINEAR, BasisSpec, LassoPath, cv_select_lambda,
                        expand_basis, fit_basis, lasso_cox_fit)
from .propensity import PropensityModel, evaluate, fit_propensity
from .simulate import HazardSpec, SimConfig, generate

__version__ = "0.1.0"

__all__ = [
    "BasisSpec", "COMPLEX", "CrossFitPlan", "Dataset", "EpisodeRow", "EpisodeTable",
    "FitResult", "HazardSpec", "HteModel", "LINEAR", "LassoPath", "Nuisances",
    "PartialLikelihoodProblem", "PropensityModel", "SimConfig", "SubjectRecord",
    "SummedProblem", "TimeIndexedProblem", "cv_select_lambda", "evaluate", "expand_basis",
    "expand_dataset", "expand_to_episodes", "fit_basis", "fit_propensity", "generate",
    "gradient", "hessian", "lasso_cox_fit", "log_partial_likelihood", "make_crossfit_plan",
    "newton_fit", "predict_hte", "read_dataset_csv", "risk_set", "s_lasso_fit", "tvcsl_fit",
    "write_dataset_csv",
]
