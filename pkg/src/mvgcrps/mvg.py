"""Multivariate Gaussian parameters with low-rank-plus-diagonal covariance.

Arrays may carry leading batch dimensions: ``mean`` is ``(..., N)``,
``cov.d`` is ``(..., N)`` and ``cov.factors`` is ``(..., N, R)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .linalg import EigDecomposition, cholesky, eig_sym

EIG_FLOOR = 1e-8


@dataclass(frozen=True)
class LowRankCovariance:
    """``diag(d) + factors @ factors.T``."""

    d: np.ndarray
    factors: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d, dtype=np.float64)
        f = np.asarray(self.factors, dtype=np.float64)
        if f.ndim == d.ndim:  # rank given as zero columns is ambiguous; treat as (N,) -> (N, 1)
            f = f[..., None]
        if f.shape[-2] != d.shape[-1]:
            raise DimensionMismatch(f"factors {f.shape} do not match diagonal {d.shape}")
        if np.any(d <= 0):
            raise ValueError("diagonal term must be strictly positive")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "factors", f)

    @property
    def dim(self) -> int:
        return self.d.shape[-1]

    @property
    def rank(self) -> int:
        return self.factors.shape[-1]


@dataclass(frozen=True)
class MVGaussianParams:
    mean: np.ndarray
    cov: LowRankCovariance

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        if mean.shape[-1] != self.cov.dim:
            raise DimensionMismatch(f"mean has {mean.shape[-1]} entries, covariance is {self.cov.dim}-dim")
        object.__setattr__(self, "mean", mean)

    @classmethod
    def from_arrays(cls, mean, d, factors) -> "MVGaussianParams":
        return cls(mean, LowRankCovariance(d, factors))


@dataclass(frozen=True)
class WhiteningResult:
    residual: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    decorrelated: np.ndarray
    whitened: np.ndarray


def densify_arrays(d: np.ndarray, factors: np.ndarray) -> np.ndarray:
    sigma = factors @ np.swapaxes(factors, -1, -2)
    idx = np.arange(d.shape[-1])
    sigma[..., idx, idx] += d
    return sigma


def densify(cov: LowRankCovariance) -> np.ndarray:
    return densify_arrays(cov.d, cov.factors)


def whiten_arrays(mean, sigma, z, eig: EigDecomposition | None = None, method: str = "jacobi"):
    """Whitening on raw arrays; returns ``(eta, lam, U, v, w, scale)`` with ``scale = sqrt(max(lam, floor))``."""
    if eig is None:
        eig = eig_sym(sigma, method=method)
    lam, u = eig
    eta = np.asarray(z, dtype=np.float64) - mean
    v = np.einsum("...ki,...k->...i", u, eta)
    scale = np.sqrt(np.maximum(lam, EIG_FLOOR))
    return eta, lam, u, v, v / scale, scale


def whiten(params: MVGaussianParams, z, method: str = "jacobi") -> WhiteningResult:
    """Decorrelate and standardize ``z`` under ``params``.

    ``w = S^{-1/2} U^T (z - mu)`` where ``U S U^T`` is the eigendecomposition of
    the dense covariance. Eigenvalues below 1e-8 are floored before the
    square root.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != params.cov.dim:
        raise DimensionMismatch(f"observation has {z.shape[-1]} entries, expected {params.cov.dim}")
    eta, lam, u, v, w, _ = whiten_arrays(params.mean, densify(params.cov), z, method=method)
    return WhiteningResult(eta, lam, u, v, w)


def _zero_safe_cholesky(sigma: np.ndarray) -> np.ndarray:
    # an exactly-zero covariance has the zero matrix as its factor
    zero = np.all(sigma == 0.0, axis=(-2, -1))
    if not np.any(zero):
        return cholesky(sigma)
    out = np.zeros_like(sigma)
    if not np.all(zero):
        out[~zero] = cholesky(sigma[~zero])
    return out


def sample_dense(mean, sigma, count: int, rng) -> np.ndarray:
    """Draw ``count`` samples ``mean + C xi`` for a dense covariance; returns ``(count, ..., N)``."""
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(rng)
    mean = np.asarray(mean, dtype=np.float64)
    chol = _zero_safe_cholesky(np.asarray(sigma, dtype=np.float64))
    shape = np.broadcast_shapes(mean.shape, chol.shape[:-1])
    xi = rng.standard_normal((count,) + shape)
    return mean + np.einsum("...ij,...j->...i", chol, xi)


def sample(params: MVGaussianParams, count: int, rng) -> np.ndarray:
    """``count`` draws from ``params`` via the Cholesky factor of the dense covariance.

    ``rng`` is a seed or ``numpy.random.Generator``; results are deterministic
    given the seed. Returns an array of shape ``(count, N)`` (plus batch dims).
    """
    return sample_dense(params.mean, densify(params.cov), count, rng)
