"""VAR(1) baseline fitted by ordinary least squares."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InsufficientHistory, SingularDesign
from .mvg import sample_dense


@dataclass(frozen=True)
class VarModel:
    """``z_t = c + A z_{t-1} + e_t`` with ``e_t ~ N(0, noise_cov)``."""

    A: np.ndarray
    c: np.ndarray
    noise_cov: np.ndarray

    def __post_init__(self):
        n = self.c.shape[0]
        if self.A.shape != (n, n) or self.noise_cov.shape != (n, n):
            raise DimensionMismatch("VAR coefficient shapes are inconsistent")

    @property
    def dim(self) -> int:
        return self.c.shape[0]


def design_matrix(series: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Regressors ``[1, z_{t-1}]`` and responses ``z_t`` for t = 1..T-1."""
    z = np.asarray(series, dtype=np.float64)
    x = np.hstack([np.ones((len(z) - 1, 1)), z[:-1]])
    return x, z[1:]


def fit_var1(series) -> VarModel:
    """OLS fit of a VAR(1) on a complete ``(T, N)`` matrix.

    The residual covariance uses the denominator ``T - 1 - (N + 1)``, floored at 1.
    Raises ``SingularDesign`` when the regressors are collinear (e.g. a constant series).
    """
    z = np.asarray(series, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    T, N = z.shape
    if T < N + 2:
        raise InsufficientHistory(f"VAR(1) with {N} series needs at least {N + 2} observations")
    if not np.all(np.isfinite(z)):
        raise ValueError("VAR(1) fit requires complete data")
    x, y = design_matrix(z)
    # rank test on the column-scaled design so units do not matter
    norms = np.linalg.norm(x, axis=0)
    if np.any(norms == 0) or np.linalg.matrix_rank(x / norms) < x.shape[1]:
        raise SingularDesign("VAR(1) design matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid = y - x @ coef
    dof = max(T - 1 - (N + 1), 1)
    cov = resid.T @ resid / dof
    return VarModel(A=coef[1:].T.copy(), c=coef[0].copy(), noise_cov=0.5 * (cov + cov.T))


def forecast_var1(model: VarModel, last, Q: int, num_samples: int, rng=0) -> np.ndarray:
    """Simulated paths ``(num_samples, Q, N)`` starting from the observation ``last``."""
    if Q < 1 or num_samples < 1:
        raise ValueError("Q and num_samples must be positive")
    rng = np.random.default_rng(rng)
    last = np.asarray(last, dtype=np.float64)
    if last.shape != (model.dim,):
        raise DimensionMismatch(f"last observation has shape {last.shape}, expected ({model.dim},)")
    noise = sample_dense(np.zeros(model.dim), model.noise_cov, num_samples * Q, rng)
    noise = noise.reshape(num_samples, Q, model.dim)
    paths = np.empty((num_samples, Q, model.dim))
    prev = np.broadcast_to(last, (num_samples, model.dim))
    for q in range(Q):
        prev = model.c + prev @ model.A.T + noise[:, q]
        paths[:, q] = prev
    return paths
