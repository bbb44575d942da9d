"""Optimal stopping under distorted expectations: exact risk kernels, regression
lower bounds, nested-simulation upper bounds and a tree oracle."""
from .dual import MartingaleEstimate, build_martingale, build_martingales, upper_bound, upper_bound_search
from .market import ExerciseGrid, GbmModel, GbmParams, PathSet, simulate_paths
from .primal import (
    Bernstein,
    BoundEstimate,
    FiniteLevels,
    RegressionPolicy,
    SearchConfig,
    TransformedPayoff,
    evaluate_policy,
    fit_policy,
    lower_bound_search,
)
from .risk import EmpiricalDist, Expectile, Semidev, choquet, mixture_eval, mu_from_distortion

__version__ = "0.1.0"
