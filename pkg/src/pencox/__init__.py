"""Penalized full-likelihood Cox frailty models.

Smooth (P-spline) log-baseline hazard, time-varying coefficients, Gaussian
log-frailties and (adaptive) lasso / group-lasso selection of linear effects,
fitted by Newton-Raphson with local quadratic approximation of the penalties.
"""

from .data import (
    DataError,
    Dataset,
    Episode,
    SchemaError,
    Subject,
    load_dataset,
    split_episodes,
    validate,
)
from .splines import DifferencePenalty, SplineBasis, build_basis, difference_penalty, evaluate
from .quadrature import EtaEvaluator, QuadratureRule, cumulative_hazard, weighted_moments
from .likelihood import (
    Design,
    FrailtyCovariance,
    ModelSpec,
    ParameterState,
    PenaltyConfig,
    fisher,
    lasso_matrix,
    penalized_loglik,
    score,
    smooth_matrix,
)
from .estimator import FitResult, FitSettings, fit, initialize, newton_step, update_smoothing, update_variance
from .selection import CvResult, PathResult, adaptive_weights, cross_validate, make_grid, path
from .simulation import MetricReport, ScenarioSpec, SimTruth, generate, invert_survival, metrics

__version__ = "0.1.0"
