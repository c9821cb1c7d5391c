"""Training losses for Gaussian forecasts: log-score, energy score, MVG-CRPS.

Each loss returns its value together with analytic gradients with respect to
the mean ``mu``, the diagonal ``d`` and the low-rank factor ``L`` of the
covariance ``diag(d) + L L^T``.

Batched inputs are supported throughout: parameters shaped ``(..., N)`` /
``(..., N, R)`` and observations ``(..., N)`` broadcast against each other,
each broadcast item is one multivariate observation, and the reported value
is the mean over items (optionally restricted by a boolean ``mask``).
Gradients are those of that mean, reduced back to the parameter shapes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import ndtr

from .errors import DimensionMismatch, NonFinite
from .linalg import cholesky, cholesky_inverse, eig_sym, solve_spd, solve_triangular
from .mvg import EIG_FLOOR, MVGaussianParams, densify_arrays

INV_SQRT_PI = 1.0 / math.sqrt(math.pi)
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
GAP_FLOOR = 1e-6
TIE_RTOL = 1e-10  # gaps below this (relative to the spectrum scale) are round-off ties
DEFAULT_EIG_METHOD = "lapack"

LOSS_IDS = ("log-score", "energy-score", "mvg-crps")


@dataclass(frozen=True)
class UnivariateGaussian:
    mu: float
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


@dataclass
class LossValueGrad:
    value: float
    grad_mu: np.ndarray
    grad_d: np.ndarray
    grad_L: np.ndarray

    def check_finite(self) -> "LossValueGrad":
        for name in ("grad_mu", "grad_d", "grad_L"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFinite(f"{name} has non-finite entries")
        return self


@dataclass(frozen=True)
class EnergyScoreConfig:
    beta: float = 1.0
    num_samples: int = 100

    def __post_init__(self):
        if not 0 < self.beta < 2:
            raise ValueError("beta must lie in (0, 2)")
        if self.num_samples < 1:
            raise ValueError("num_samples must be positive")


# --------------------------------------------------------------------------
# univariate CRPS and log-score


def _phi(w):
    return np.exp(-0.5 * np.square(w)) / math.sqrt(2.0 * math.pi)


def crps_standard_normal(w):
    """CRPS of the standard normal at ``w``: ``w(2 Phi(w) - 1) + 2 phi(w) - 1/sqrt(pi)``."""
    w = np.asarray(w, dtype=np.float64)
    out = w * (2.0 * ndtr(w) - 1.0) + 2.0 * _phi(w) - INV_SQRT_PI
    return out if out.ndim else float(out)


def crps_gaussian(g: UnivariateGaussian, z) -> float:
    """CRPS of ``N(mu, sigma^2)`` at ``z`` via the scaling identity."""
    return g.sigma * crps_standard_normal((np.asarray(z, dtype=np.float64) - g.mu) / g.sigma)


def log_score_uni(g: UnivariateGaussian, z: float) -> tuple[float, float, float]:
    """Univariate negative log density and its gradients ``(value, d/dmu, d/dsigma)``."""
    eps = (z - g.mu) / g.sigma
    value = 0.5 * eps * eps + math.log(g.sigma) + HALF_LOG_2PI
    return value, -eps / g.sigma, (1.0 - eps * eps) / g.sigma


# --------------------------------------------------------------------------
# helpers


def _sum_to(x: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``x`` over the leading dims that were added by broadcasting to ``shape``."""
    extra = x.ndim - len(shape)
    if extra:
        x = x.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and x.shape[i] != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return x


def _item_weights(item_shape: tuple, mask) -> np.ndarray:
    if mask is None:
        count = int(np.prod(item_shape)) if item_shape else 1
        return np.full(item_shape, 1.0 / count)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), item_shape)
    count = int(m.sum())
    return m / max(count, 1)


def _check_dims(mean, d, factors, z):
    n = mean.shape[-1]
    if d.shape[-1] != n or factors.shape[-2] != n or z.shape[-1] != n:
        raise DimensionMismatch(
            f"inconsistent dimensions: mean {mean.shape}, d {d.shape}, L {factors.shape}, z {z.shape}"
        )


def _param_batch(mean, d, factors) -> tuple:
    return np.broadcast_shapes(mean.shape[:-1], d.shape[:-1], factors.shape[:-2])


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _cov_grads(gsigma: np.ndarray, d: np.ndarray, factors: np.ndarray):
    """Map a symmetric gradient w.r.t. the dense covariance to (grad_d, grad_L)."""
    gsigma = _sym(gsigma)
    gd = np.diagonal(gsigma, axis1=-2, axis2=-1)
    gl = 2.0 * gsigma @ factors
    return _sum_to(gd, d.shape), _sum_to(gl, factors.shape)


def eigh_backward(lam: np.ndarray, u: np.ndarray, glam: np.ndarray, gu: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. a symmetric matrix given gradients w.r.t. its eigenpairs.

    Uses ``U (diag(glam) + F o (U^T gU)) U^T`` with ``F_ij = 1/(lam_j - lam_i)``;
    each gap is floored in magnitude at 1e-6 and tied eigenvalues contribute
    nothing. A tie is a gap within round-off of the spectrum scale: a repeated
    eigenvalue comes back from the solver split by ~1e-16, which the floor
    alone would turn into a 1e6 factor.
    """
    gap = lam[..., None, :] - lam[..., :, None]
    scale = np.max(np.abs(lam), axis=-1, keepdims=True)[..., None]
    tie = np.abs(gap) <= TIE_RTOL * np.maximum(scale, 1.0)
    denom = np.sign(gap) * np.maximum(np.abs(gap), GAP_FLOOR)
    f = np.divide(1.0, denom, out=np.zeros_like(gap), where=~tie)
    inner = f * (np.swapaxes(u, -1, -2) @ gu)
    idx = np.arange(lam.shape[-1])
    inner[..., idx, idx] += glam
    return _sym(u @ inner @ np.swapaxes(u, -1, -2))


def cholesky_backward(chol: np.ndarray, gchol: np.ndarray) -> np.ndarray:
    """Symmetric gradient w.r.t. ``A`` given the gradient w.r.t. its Cholesky factor."""
    p = np.swapaxes(chol, -1, -2) @ np.tril(gchol)
    p = np.tril(p)
    idx = np.arange(chol.shape[-1])
    p[..., idx, idx] *= 0.5
    # chol^{-T} p chol^{-1}
    x = solve_triangular(chol, p, transpose=True, matrix_rhs=True)
    x = np.swapaxes(solve_triangular(chol, np.swapaxes(x, -1, -2), transpose=True, matrix_rhs=True), -1, -2)
    return _sym(x)


# --------------------------------------------------------------------------
# array-level losses: (mean, d, L, z) -> (value, gmu, gd, gL)


def mvg_crps_arrays(mean, d, factors, z, mask=None, *, eig_grad="full", eig_method=DEFAULT_EIG_METHOD,
                    with_grad=True):
    mean, d, factors, z = (np.asarray(a, dtype=np.float64) for a in (mean, d, factors, z))
    _check_dims(mean, d, factors, z)
    pshape = _param_batch(mean, d, factors)
    d_b = np.broadcast_to(d, pshape + d.shape[-1:])
    f_b = np.broadcast_to(factors, pshape + factors.shape[-2:])
    sigma = densify_arrays(d_b, f_b)
    lam, u = eig_sym(sigma, method=eig_method)

    eta = z - mean
    item_shape = eta.shape[:-1]
    v = np.einsum("...ki,...k->...i", u, eta)
    scale = np.sqrt(np.maximum(lam, EIG_FLOOR))
    w = v / scale
    per_item = np.sum(scale * crps_standard_normal(w), axis=-1)
    weights = _item_weights(item_shape, mask)
    value = float(np.sum(weights * per_item))
    if not with_grad:
        return value, None, None, None

    gv = weights[..., None] * (2.0 * ndtr(w) - 1.0)
    geta = np.einsum("...ki,...i->...k", u, gv)
    gmu = _sum_to(-geta, mean.shape)
    if eig_grad == "stop":
        return value, gmu, np.zeros_like(d), np.zeros_like(factors)
    if eig_grad != "full":
        raise ValueError(f"unknown eig_grad mode {eig_grad!r}")

    gscale = weights[..., None] * (2.0 * _phi(w) - INV_SQRT_PI)
    glam = np.where(lam > EIG_FLOOR, 1.0, 0.0) * _sum_to(gscale, lam.shape) / (2.0 * scale)
    gu = _sum_to(eta[..., :, None] * gv[..., None, :], u.shape)
    gsigma = eigh_backward(lam, u, glam, gu)
    gd, gl = _cov_grads(gsigma, d, factors)
    return value, gmu, gd, gl


def log_score_arrays(mean, d, factors, z, mask=None, *, with_grad=True):
    mean, d, factors, z = (np.asarray(a, dtype=np.float64) for a in (mean, d, factors, z))
    _check_dims(mean, d, factors, z)
    n = mean.shape[-1]
    pshape = _param_batch(mean, d, factors)
    sigma = densify_arrays(np.broadcast_to(d, pshape + (n,)), np.broadcast_to(factors, pshape + factors.shape[-2:]))
    chol = cholesky(sigma)
    eta = z - mean
    item_shape = eta.shape[:-1]
    alpha = solve_spd(chol, eta)
    half_logdet = np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    per_item = half_logdet + 0.5 * np.sum(eta * alpha, axis=-1) + n * HALF_LOG_2PI
    weights = _item_weights(item_shape, mask)
    value = float(np.sum(weights * per_item))
    if not with_grad:
        return value, None, None, None

    wa = weights[..., None] * alpha
    gmu = _sum_to(-wa, mean.shape)
    wsum = _sum_to(np.broadcast_to(weights, item_shape), pshape)
    outer = _sum_to(wa[..., :, None] * alpha[..., None, :], pshape + (n, n))
    gsigma = 0.5 * (wsum[..., None, None] * cholesky_inverse(chol) - outer)
    gd, gl = _cov_grads(gsigma, d, factors)
    return value, gmu, gd, gl


def energy_score_from_samples(samples, samples_prime, z, beta=1.0, *, with_grad=False):
    """Monte-Carlo energy score from two sample sets.

    ``(1/n) sum_i |Z_i - z|^beta - 1/(2 n^2) sum_ij |Z_i - Z'_j|^beta`` with
    ``samples`` / ``samples_prime`` shaped ``(..., n, N)`` and ``z`` ``(..., N)``.
    Returns per-item values, plus gradients w.r.t. both sample sets when
    ``with_grad`` is set.
    """
    zs = np.asarray(samples, dtype=np.float64)
    zp = np.asarray(samples_prime, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    n = zs.shape[-2]
    if zp.shape[-2] != n:
        raise DimensionMismatch("sample sets must have equal size")
    # pairwise distances are translation invariant; centre on the observation for accuracy
    r = zs - z[..., None, :]
    rp = zp - z[..., None, :]
    a = np.sqrt(np.sum(r * r, axis=-1))
    sq = np.sum(r * r, axis=-1)[..., :, None] + np.sum(rp * rp, axis=-1)[..., None, :] \
        - 2.0 * (r @ np.swapaxes(rp, -1, -2))
    dist = np.sqrt(np.maximum(sq, 0.0))
    value = np.mean(a**beta, axis=-1) - np.sum(dist**beta, axis=(-2, -1)) / (2.0 * n * n)
    if not with_grad:
        return value
    ca = np.divide(beta * a ** (beta - 1.0), a, out=np.zeros_like(a), where=a > 0) / n
    g_zs = ca[..., None] * r
    cd = np.divide(beta * dist ** (beta - 1.0), dist, out=np.zeros_like(dist), where=dist > 0) / (2.0 * n * n)
    g_zs -= cd.sum(axis=-1)[..., None] * r - cd @ rp
    g_zp = -(np.swapaxes(cd, -1, -2).sum(axis=-1)[..., None] * rp - np.swapaxes(cd, -1, -2) @ r)
    return value, g_zs, g_zp


def energy_score_arrays(mean, d, factors, z, mask=None, *, rng=0, cfg: EnergyScoreConfig = EnergyScoreConfig(),
                        with_grad=True):
    mean, d, factors, z = (np.asarray(a, dtype=np.float64) for a in (mean, d, factors, z))
    _check_dims(mean, d, factors, z)
    n_dim = mean.shape[-1]
    pshape = _param_batch(mean, d, factors)
    sigma = densify_arrays(np.broadcast_to(d, pshape + (n_dim,)),
                           np.broadcast_to(factors, pshape + factors.shape[-2:]))
    chol = cholesky(sigma)
    item_shape = np.broadcast_shapes(mean.shape, z.shape)[:-1]
    mean_b = np.broadcast_to(mean, item_shape + (n_dim,))
    rng = np.random.default_rng(rng)
    n = cfg.num_samples
    xi = rng.standard_normal(item_shape + (n, n_dim))
    xi_p = rng.standard_normal(item_shape + (n, n_dim))
    c_t = np.swapaxes(chol, -1, -2)
    zs = mean_b[..., None, :] + xi @ c_t
    zp = mean_b[..., None, :] + xi_p @ c_t
    weights = _item_weights(item_shape, mask)
    if not with_grad:
        per_item = energy_score_from_samples(zs, zp, z, cfg.beta)
        return float(np.sum(weights * per_item)), None, None, None
    per_item, g_zs, g_zp = energy_score_from_samples(zs, zp, z, cfg.beta, with_grad=True)
    value = float(np.sum(weights * per_item))
    g_zs *= weights[..., None, None]
    g_zp *= weights[..., None, None]
    gmu = _sum_to(g_zs.sum(axis=-2) + g_zp.sum(axis=-2), mean.shape)
    gchol = np.swapaxes(g_zs, -1, -2) @ xi + np.swapaxes(g_zp, -1, -2) @ xi_p
    gchol = _sum_to(gchol, chol.shape)
    gsigma = cholesky_backward(chol, gchol)
    gd, gl = _cov_grads(gsigma, d, factors)
    return value, gmu, gd, gl


# --------------------------------------------------------------------------
# parameter-object API


def _wrap(result) -> LossValueGrad:
    value, gmu, gd, gl = result
    return LossValueGrad(value, gmu, gd, gl).check_finite()


def mvg_crps(params: MVGaussianParams, z, *, eig_grad: str = "full", eig_method: str = DEFAULT_EIG_METHOD,
             mask=None) -> LossValueGrad:
    """MVG-CRPS: whiten the residual, score each coordinate with the standard-normal
    CRPS and weight it by the square root of its eigenvalue.

    ``eig_grad="stop"`` treats the eigenpairs as constants, so only the mean
    receives a gradient.
    """
    return _wrap(mvg_crps_arrays(params.mean, params.cov.d, params.cov.factors, z, mask,
                                 eig_grad=eig_grad, eig_method=eig_method))


def log_score(params: MVGaussianParams, z, *, mask=None) -> LossValueGrad:
    """Negative log density ``0.5 ln|S| + 0.5 eta^T S^-1 eta + (N/2) ln 2 pi``."""
    return _wrap(log_score_arrays(params.mean, params.cov.d, params.cov.factors, z, mask))


def energy_score_mc(params: MVGaussianParams, z, cfg: EnergyScoreConfig = EnergyScoreConfig(), rng=0, *,
                    mask=None) -> LossValueGrad:
    """Monte-Carlo energy score with reparameterized samples ``mu + C xi``.

    The standard-normal draws are fixed by ``rng`` so repeated calls with the
    same seed see the same noise (common random numbers).
    """
    if cfg.num_samples < 2:
        raise ValueError("energy score needs at least 2 samples per set")
    return _wrap(energy_score_arrays(params.mean, params.cov.d, params.cov.factors, z, mask, rng=rng, cfg=cfg))


def loss_function(loss_id: str, **options) -> Callable:
    """Array-level loss ``f(mean, d, L, z, mask, rng) -> (value, gmu, gd, gL)`` for a loss id."""
    if loss_id == "mvg-crps":
        return lambda m, d, f, z, mask=None, rng=None, with_grad=True: mvg_crps_arrays(
            m, d, f, z, mask, with_grad=with_grad, **options)
    if loss_id == "log-score":
        return lambda m, d, f, z, mask=None, rng=None, with_grad=True: log_score_arrays(
            m, d, f, z, mask, with_grad=with_grad)
    if loss_id == "energy-score":
        cfg = options.get("cfg", EnergyScoreConfig())
        return lambda m, d, f, z, mask=None, rng=0, with_grad=True: energy_score_arrays(
            m, d, f, z, mask, rng=rng, cfg=cfg, with_grad=with_grad)
    raise ValueError(f"unknown loss id {loss_id!r}; expected one of {LOSS_IDS}")


def grad_check(loss_id: str, params: MVGaussianParams, z, step: float = 1e-5, **options) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    Every coordinate of ``mu``, ``d`` and ``L`` is perturbed by ``+-step``;
    relative errors use ``max(|analytic|, |numeric|, 1e-6)`` as denominator.
    For the energy score pass a fixed ``rng`` so both evaluations share noise.
    """
    if not 1e-6 <= step <= 1e-3:
        raise ValueError("step must lie in [1e-6, 1e-3]")
    rng = options.pop("rng", 0)
    fn = loss_function(loss_id, **options)
    arrays = [np.array(params.mean, dtype=np.float64), np.array(params.cov.d, dtype=np.float64),
              np.array(params.cov.factors, dtype=np.float64)]
    _, *analytic = fn(*arrays, z, None, rng)
    worst = 0.0
    for k, arr in enumerate(arrays):
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            up = fn(*arrays, z, None, rng, with_grad=False)[0]
            arr[idx] = orig - step
            down = fn(*arrays, z, None, rng, with_grad=False)[0]
            arr[idx] = orig
            numeric = (up - down) / (2.0 * step)
            a = analytic[k][idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst
