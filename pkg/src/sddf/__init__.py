"""Directional distance function frontiers: CNLS-d, comparators, and Monte Carlo tools."""

__version__ = "0.1.0"

from .data import DataError, Dataset, Direction, NoiseModel, ScaleInfo, median_direction, normalize
from .estimators import (
    EstimationError,
    EstimatorSpec,
    FrontierModel,
    LinearDdfModel,
    fit_cnls_d,
    fit_cnls_d_isoquant,
    fit_cnls_d_multidir,
    fit_local_linear,
    fit_parametric_ddf,
    fit_quadratic,
)
from .evaluation import MetricError, directional_mse, isoquant_radial_mse, kfold_mse, radial_mse
from .qp import QpProblem, solve_qp, verify_kkt

__all__ = [
    "DataError", "Dataset", "Direction", "NoiseModel", "ScaleInfo", "median_direction", "normalize",
    "EstimationError", "EstimatorSpec", "FrontierModel", "LinearDdfModel", "fit_cnls_d",
    "fit_cnls_d_isoquant", "fit_cnls_d_multidir", "fit_local_linear", "fit_parametric_ddf",
    "fit_quadratic", "MetricError", "directional_mse", "isoquant_radial_mse", "kfold_mse",
    "radial_mse", "QpProblem", "solve_qp", "verify_kkt",
]
