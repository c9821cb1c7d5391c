"""Scoring-rule losses for multivariate Gaussian forecasts, with toy forecasters and a backtest harness."""
from .errors import (Diverged, DimensionMismatch, EigFailure, InsufficientHistory, IrregularFrequency, MVGError,
                     NoConvergence, NonFinite, NonSymmetric, NotPositiveDefinite, ParseError, ShapeMismatch,
                     SingularDesign)
from .linalg import EigDecomposition, cholesky, eig_sym, solve_spd, solve_triangular
from .mvg import LowRankCovariance, MVGaussianParams, WhiteningResult, densify, sample, whiten
from .scoring import (LOSS_IDS, EnergyScoreConfig, LossValueGrad, UnivariateGaussian, crps_gaussian,
                      crps_standard_normal, energy_score_mc, grad_check, log_score, log_score_uni, mvg_crps)

__version__ = "0.1.0"
