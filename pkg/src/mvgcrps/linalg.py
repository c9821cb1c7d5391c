"""Dense symmetric linear algebra: Jacobi eigensolver, Cholesky, triangular solves.

Every routine accepts a single matrix of shape ``(n, n)`` or a stack of
matrices ``(..., n, n)`` and works on the whole stack at once; the per-matrix
results do not depend on what else is in the stack.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import DimensionMismatch, NoConvergence, NonSymmetric, NotPositiveDefinite

SYMMETRY_RTOL = 1e-10
MAX_SWEEPS = 100
JITTER_SCALE = 1e-8
JITTER_ESCALATIONS = 3


class EigDecomposition(NamedTuple):
    eigenvalues: np.ndarray  # (..., n), descending
    eigenvectors: np.ndarray  # (..., n, n), column i pairs with eigenvalue i


def _as_square(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2] or a.shape[-1] < 1:
        raise DimensionMismatch(f"expected square matrix, got shape {a.shape}")
    return a


def check_symmetric(a: np.ndarray, rtol: float = SYMMETRY_RTOL) -> None:
    scale = np.max(np.abs(a), axis=(-2, -1), keepdims=True)
    asym = np.max(np.abs(a - np.swapaxes(a, -1, -2)), axis=(-2, -1), keepdims=True)
    if np.any(asym > rtol * scale):
        raise NonSymmetric(f"matrix asymmetry {float(np.max(asym)):.3e} exceeds tolerance")


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings for one sweep: n-1 rounds (n even) of disjoint (p, q) pairs, p < q."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[k], players[m - 1 - k]) for k in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a < n and b < n]
        if pairs:
            p, q = zip(*pairs)
            rounds.append((np.array(p), np.array(q)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _apply_sign_convention(vecs: np.ndarray) -> np.ndarray:
    # largest-magnitude component nonnegative; argmax picks the lowest index on ties
    idx = np.argmax(np.abs(vecs), axis=-2)
    lead = np.take_along_axis(vecs, idx[..., None, :], axis=-2)
    sign = np.where(lead < 0, -1.0, 1.0)
    return vecs * sign


def eig_sym(m, method: str = "jacobi", max_sweeps: int = MAX_SWEEPS) -> EigDecomposition:
    """Eigendecomposition of a symmetric matrix.

    The default ``method="jacobi"`` runs cyclic (round-robin) Jacobi sweeps:
    each round applies a set of disjoint Givens rotations simultaneously, so
    one sweep annihilates every off-diagonal pair once. ``method="lapack"``
    delegates to ``numpy.linalg.eigh`` and is much faster on large stacks.
    Both return eigenvalues sorted descending with each eigenvector's
    largest-magnitude component made nonnegative, so the output is
    deterministic and the two backends agree to rounding.

    Raises
    ------
    NonSymmetric
        If ``m`` is not symmetric within a relative tolerance of 1e-10.
    NoConvergence
        If the off-diagonal mass has not vanished after ``max_sweeps`` sweeps.
    """
    a = _as_square(m)
    if not np.all(np.isfinite(a)):
        raise NoConvergence("eig_sym input contains non-finite entries")
    check_symmetric(a)
    n = a.shape[-1]
    batch = a.shape[:-2]
    a = 0.5 * (a + np.swapaxes(a, -1, -2))
    a = a.reshape((-1, n, n)).copy()
    v = np.broadcast_to(np.eye(n), a.shape).copy()

    if method == "lapack":
        lam, v = np.linalg.eigh(a)
        a = lam[..., None] * np.eye(n)
    elif method != "jacobi":
        raise ValueError(f"unknown eigensolver {method!r}")
    elif n > 1:
        rounds = _round_robin(n)
        fro = np.sqrt(np.sum(a * a, axis=(-2, -1)))
        tol = max(1e-14, 4 * n * np.finfo(float).eps) * fro
        offmask = ~np.eye(n, dtype=bool)
        eye = np.broadcast_to(np.eye(n), a.shape)
        for sweep in range(max_sweeps + 1):
            off = np.sqrt(np.sum(np.where(offmask, a * a, 0.0), axis=(-2, -1)))
            if np.all(off <= tol):
                break
            if sweep == max_sweeps:
                raise NoConvergence(f"Jacobi did not converge in {max_sweeps} sweeps")
            for p, q in rounds:
                app = a[:, p, p]
                aqq = a[:, q, q]
                apq = a[:, p, q]
                nz = apq != 0.0
                safe = np.where(nz, apq, 1.0)
                tau = (aqq - app) / (2.0 * safe)
                t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
                t = np.where(nz, t, 0.0)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                rot = eye.copy()
                rot[:, p, p] = c
                rot[:, q, q] = c
                rot[:, p, q] = s
                rot[:, q, p] = -s
                a = np.swapaxes(rot, -1, -2) @ a @ rot
                v = v @ rot

    lam = np.diagonal(a, axis1=-2, axis2=-1)
    order = np.argsort(-lam, axis=-1, kind="stable")
    lam = np.take_along_axis(lam, order, axis=-1)
    v = np.take_along_axis(v, order[:, None, :], axis=-1)
    v = _apply_sign_convention(v)
    return EigDecomposition(lam.reshape(batch + (n,)), v.reshape(batch + (n, n)))


def _cholesky_raw(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column-by-column Cholesky on a stack (k, n, n); returns factor and per-matrix ok flag."""
    k, n, _ = a.shape
    low = np.zeros_like(a)
    ok = np.ones(k, dtype=bool)
    for j in range(n):
        row = low[:, j, :j]
        pivot = a[:, j, j] - np.sum(row * row, axis=-1)
        good = pivot > 0
        ok &= good
        ljj = np.sqrt(np.where(good, pivot, 1.0))
        low[:, j, j] = ljj
        if j + 1 < n:
            below = a[:, j + 1:, j] - np.sum(low[:, j + 1:, :j] * row[:, None, :], axis=-1)
            low[:, j + 1:, j] = below / ljj[:, None]
    return low, ok


def cholesky(m) -> np.ndarray:
    """Lower-triangular Cholesky factor, with escalating diagonal jitter on failure.

    The plain factorization is tried first. Matrices that fail get
    ``1e-8 * trace/n`` added to the diagonal, escalated by 10x up to three
    times; anything still failing raises ``NotPositiveDefinite``.
    """
    a = _as_square(m)
    check_symmetric(a)
    n = a.shape[-1]
    batch = a.shape[:-2]
    flat = a.reshape((-1, n, n))
    low, ok = _cholesky_raw(flat)
    if not np.all(ok):
        base = JITTER_SCALE * np.trace(flat, axis1=-2, axis2=-1) / n
        eye = np.eye(n)
        for k in range(JITTER_ESCALATIONS + 1):
            bad = np.flatnonzero(~ok)
            jitter = (base[bad] * 10.0**k)[:, None, None]
            low_bad, ok_bad = _cholesky_raw(flat[bad] + jitter * eye)
            ok_bad &= jitter[:, 0, 0] > 0
            low[bad[ok_bad]] = low_bad[ok_bad]
            ok[bad[ok_bad]] = True
            if np.all(ok):
                break
        else:
            raise NotPositiveDefinite("matrix is not positive definite after maximum jitter")
    return low.reshape(batch + (n, n))


def solve_triangular(low: np.ndarray, b: np.ndarray, *, transpose: bool = False,
                     matrix_rhs: bool = False) -> np.ndarray:
    """Solve ``low @ x = b`` (or ``low.T @ x = b``) for lower-triangular ``low``.

    ``b`` is a stack of vectors ``(..., n)``, or of matrices ``(..., n, k)``
    when ``matrix_rhs`` is set; batch dims broadcast against ``low``.
    """
    low = np.asarray(low, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = low.shape[-1]
    if not matrix_rhs:
        b = b[..., None]
    if b.ndim < 2 or b.shape[-2] != n:
        raise DimensionMismatch(f"rhs shape {b.shape} incompatible with {n}x{n} factor")
    shape = np.broadcast_shapes(low.shape[:-2], b.shape[:-2]) + b.shape[-2:]
    x = np.zeros(shape)
    b = np.broadcast_to(b, shape)
    if not transpose:
        for i in range(n):
            acc = b[..., i, :] - np.einsum("...j,...jk->...k", low[..., i, :i], x[..., :i, :])
            x[..., i, :] = acc / low[..., i, i, None]
    else:
        for i in range(n - 1, -1, -1):
            acc = b[..., i, :] - np.einsum("...j,...jk->...k", low[..., i + 1:, i], x[..., i + 1:, :])
            x[..., i, :] = acc / low[..., i, i, None]
    return x if matrix_rhs else x[..., 0]


def solve_spd(chol: np.ndarray, b, *, matrix_rhs: bool = False) -> np.ndarray:
    """Solve ``(chol @ chol.T) x = b`` given a Cholesky factor.

    Raises ``DimensionMismatch`` if ``b`` does not have ``n`` rows.
    """
    y = solve_triangular(chol, b, matrix_rhs=matrix_rhs)
    return solve_triangular(chol, y, transpose=True, matrix_rhs=matrix_rhs)


def cholesky_inverse(chol: np.ndarray) -> np.ndarray:
    """Inverse of ``chol @ chol.T``."""
    n = chol.shape[-1]
    return solve_spd(chol, np.broadcast_to(np.eye(n), chol.shape), matrix_rhs=True)
