"""Dense linear-algebra kernels: thin SVD, Tikhonov filtering, GCV, NNLS.

Everything here is a pure function of its inputs so that callers may run
row solves or independent NNLS problems from several threads.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NnlsError(RuntimeError):
    """Raised when NNLS stops before meeting its residual criterion.

    The best iterate found is kept on ``solution`` so that callers can
    inspect or accept it.
    """

    def __init__(self, message: str, solution: "NnlsSolution"):
        super().__init__(message)
        self.solution = solution


@dataclass(frozen=True)
class ThinSvd:
    left: np.ndarray
    singular_values: np.ndarray
    right: np.ndarray

    @property
    def rank(self) -> int:
        return self.singular_values.size

    def reconstruct(self) -> np.ndarray:
        return (self.left * self.singular_values) @ self.right.T


@dataclass(frozen=True)
class NnlsSolution:
    weights: np.ndarray
    residual_norm: float
    iterations: int

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.weights)


def thin_svd(a: np.ndarray) -> ThinSvd:
    """Thin SVD truncated at numerical rank ``max(m, p) * eps * sigma_max``."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ValueError("thin_svd expects a 2-D array")
    if not np.any(a):
        raise ValueError("zero matrix has no thin SVD")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    cutoff = max(a.shape) * np.finfo(float).eps * s[0]
    k = int(np.count_nonzero(s > cutoff))
    return ThinSvd(u[:, :k].copy(), s[:k].copy(), vt[:k].T.copy())


def filter_factors(sigma: np.ndarray, alpha: float) -> np.ndarray:
    """Tikhonov filter factors sigma^2 / (sigma^2 + alpha^2)."""
    s2 = sigma * sigma
    return s2 / (s2 + alpha * alpha)


def tikhonov_row_solve(svd: ThinSvd, rhs: np.ndarray, alpha: float) -> np.ndarray:
    """Solve ``min ||Q^T h - rhs||^2 + alpha^2 ||h||^2`` from the SVD of Q.

    ``svd`` factors the feature matrix Q (features x samples); ``rhs`` is one
    sample-indexed row of the target. With ``alpha == 0`` the result is the
    minimum-norm least-squares solution.
    """
    if alpha < 0:
        raise ValueError("negative regularization")
    beta = svd.right.T @ np.asarray(rhs, dtype=float)
    coeff = filter_factors(svd.singular_values, alpha) * beta / svd.singular_values
    return svd.left @ coeff


def gcv_score(svd: ThinSvd, rhs: np.ndarray, alpha: float) -> float:
    """Generalized cross-validation functional of one Tikhonov row problem."""
    rhs = np.asarray(rhs, dtype=float)
    return float(gcv_scores(svd, rhs[None, :], alpha)[0])


def gcv_scores(svd: ThinSvd, rhs_rows: np.ndarray, alpha: float,
               beta: np.ndarray | None = None,
               outside: np.ndarray | None = None) -> np.ndarray:
    """Vectorized :func:`gcv_score` over the rows of ``rhs_rows``.

    ``beta`` (rows x k) and ``outside`` (squared norm of each row outside the
    row space of Q) may be passed in when scanning many alphas.
    """
    n_samples = svd.right.shape[0]
    if beta is None:
        beta = rhs_rows @ svd.right
    if outside is None:
        outside = np.maximum(np.einsum("ij,ij->i", rhs_rows, rhs_rows)
                             - np.einsum("ij,ij->i", beta, beta), 0.0)
    f = filter_factors(svd.singular_values, alpha)
    resid = ((1.0 - f) * beta) ** 2
    numerator = resid.sum(axis=1) + outside
    dof = n_samples - f.sum()
    if dof <= 1e-12 * n_samples:
        return np.full(numerator.shape, np.inf)
    return numerator / dof**2


def nnls_early_stop(c: np.ndarray, d: np.ndarray, tau: float,
                    max_passes: int | None = None) -> NnlsSolution:
    """Lawson-Hanson NNLS stopped once ``||C x - d|| <= tau ||d||``.

    One column enters the passive set per outer pass. Tall systems are first
    compressed by a QR factorization; the residual is tracked exactly through
    the orthogonal complement.
    """
    c = np.asarray(c, dtype=float)
    d = np.asarray(d, dtype=float)
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    d_norm = np.linalg.norm(d)
    if d_norm == 0:
        raise ValueError("right-hand side is zero")
    m, n_cols = c.shape
    if max_passes is None:
        max_passes = 10 * n_cols
    target = tau * d_norm

    if m > n_cols:
        q, r = np.linalg.qr(c)
        rhs = q.T @ d
        offset2 = max(d_norm**2 - rhs @ rhs, 0.0)
        a = r
    else:
        a, rhs, offset2 = c, d, 0.0

    def residual(x):
        rr = a @ x - rhs
        return np.sqrt(rr @ rr + offset2)

    def finish(x, passes):
        x = np.where(x > 0, x, 0.0)
        return NnlsSolution(x, float(np.linalg.norm(c @ x - d)), passes)

    x = np.zeros(n_cols)
    passive = np.zeros(n_cols, dtype=bool)
    blocked = np.zeros(n_cols, dtype=bool)
    grad_tol = 10 * max(m, n_cols) * np.finfo(float).eps * np.linalg.norm(a, 1) \
        * np.linalg.norm(rhs)
    passes = 0
    while True:
        res = residual(x)
        if res <= target:
            return finish(x, passes)
        if passes >= max_passes:
            raise NnlsError(f"NNLS did not reach tau={tau:g} after {passes} passes "
                            f"(residual ratio {res / d_norm:.3e})", finish(x, passes))
        w = a.T @ (rhs - a @ x)
        w[passive | blocked] = -np.inf
        j = int(np.argmax(w))
        if w[j] <= grad_tol:
            raise NnlsError(f"NNLS optimum has residual ratio {res / d_norm:.3e} > tau={tau:g}",
                            finish(x, passes))
        passive[j] = True
        passes += 1
        while True:
            idx = np.flatnonzero(passive)
            z = np.zeros(n_cols)
            z[idx] = np.linalg.lstsq(a[:, idx], rhs, rcond=None)[0]
            if np.all(z[idx] > 0):
                x = z
                blocked[:] = False
                break
            neg = idx[z[idx] <= 0]
            step = np.min(x[neg] / (x[neg] - z[neg]))
            x = x + step * (z - x)
            drop = passive & (x <= 1e-14 * max(1.0, x.max()))
            if step == 0 and drop.sum() == 1 and drop[j]:
                # rounding made the entering column inactive; skip it until x moves
                passive[j] = False
                blocked[j] = True
                break
            passive &= ~drop
            x[~passive] = 0.0
            if not passive.any():
                break
