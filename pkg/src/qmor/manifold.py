"""Affine and quadratic approximation manifolds.

A manifold maps generalized coordinates ``q`` (length n) to states

    u(q) = u_ref + V q + H_bar kappa(q)

where ``kappa(q)`` holds the n(n+1)/2 distinct products ``q_i q_j`` (i <= j)
in lexicographic order, without a factor of two on the off-diagonal
products. The affine manifold is the special case ``H_bar = 0``.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .numerics import ThinSvd, gcv_scores, thin_svd, tikhonov_row_solve
from .snapshots import (FLOAT, FormatError, ReducedBasis, SnapshotSet, parse_header,
                        payload_digest, read_floats)

log = logging.getLogger(__name__)

MAN_MAGIC = "QMOR-MAN"
RECORD_FIELDS = ("omega", "zeta", "epsilon", "n_tra", "n_qua_prime", "n_qua",
                 "sigma_min", "sigma_max", "alpha_star", "alpha_override")


class InversionError(RuntimeError):
    def __init__(self, message: str, q: np.ndarray, residual_norm: float):
        super().__init__(message)
        self.q = q
        self.residual_norm = residual_norm


def feature_count(n: int) -> int:
    return n * (n + 1) // 2


@lru_cache(maxsize=64)
def feature_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column indices ``(i, j)``, ``i <= j``, in lexicographic order."""
    i, j = np.triu_indices(n)
    i.setflags(write=False)
    j.setflags(write=False)
    return i, j


def pair_index(i: int, j: int, n: int) -> int:
    """Flat position of pair ``(min(i,j), max(i,j))`` in :func:`feature_pairs`."""
    i, j = min(i, j), max(i, j)
    return i * n - i * (i - 1) // 2 + (j - i)


def unique_kron(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    i, j = feature_pairs(q.shape[0])
    return q[i] * q[j]


def unique_kron_columns(qs: np.ndarray) -> np.ndarray:
    """:func:`unique_kron` applied to every column of ``qs`` (n x m)."""
    i, j = feature_pairs(qs.shape[0])
    return qs[i] * qs[j]


def unique_kron_tangent(q: np.ndarray) -> np.ndarray:
    """Jacobian of :func:`unique_kron`, shape n(n+1)/2 x n."""
    q = np.asarray(q, dtype=float)
    n = q.shape[0]
    i, j = feature_pairs(n)
    rows = np.arange(i.size)
    out = np.zeros((i.size, n))
    out[rows, i] += q[j]
    out[rows, j] += q[i]
    return out


def dimension_heuristic(n_tra: int, zeta: float, n_snapshots: int) -> tuple[int, int, int]:
    """Quadratic-manifold dimension from the affine dimension ``n_tra``.

    Returns ``(n_qua_prime, n_qua, n)``. The first two are rounded to the
    nearest integer; the snapshot-count cap uses the floor.
    """
    if n_tra < 1:
        raise ValueError("n_tra must be >= 1")
    n_qua_prime = round((math.sqrt(9 + 8 * n_tra) - 3) / 2)
    n_qua = round((1 + zeta) * n_qua_prime)
    cap = math.floor((math.sqrt(1 + 8 * n_snapshots) - 1) / 2)
    return n_qua_prime, n_qua, max(1, min(n_qua, cap))


def snapshot_cap(n_snapshots: int) -> int:
    return math.floor((math.sqrt(1 + 8 * n_snapshots) - 1) / 2)


@dataclass(frozen=True)
class BuildIntermediates:
    error_matrix: np.ndarray
    feature_matrix: np.ndarray
    feature_svd: ThinSvd
    coordinates: np.ndarray


@dataclass(frozen=True)
class Manifold:
    """Affine (``h_bar is None``) or quadratic approximation manifold."""

    basis: ReducedBasis
    u_ref: np.ndarray
    h_bar: np.ndarray | None = None
    build_record: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        v = self.basis.basis
        if self.u_ref.shape != (v.shape[0],):
            raise ValueError("u_ref and basis row counts differ")
        if self.h_bar is not None and self.h_bar.shape != (v.shape[0], feature_count(v.shape[1])):
            raise ValueError("h_bar must be N x n(n+1)/2")

    @property
    def kind(self) -> str:
        return "affine" if self.h_bar is None else "quadratic"

    @property
    def dimension(self) -> int:
        return self.basis.dimension

    @property
    def state_dimension(self) -> int:
        return self.u_ref.shape[0]

    @property
    def V(self) -> np.ndarray:
        return self.basis.basis

    @property
    def alpha_star(self) -> float | None:
        return self.build_record.get("alpha_star")

    def _check(self, q):
        q = np.asarray(q, dtype=float)
        if q.shape != (self.dimension,):
            raise ValueError(f"expected {self.dimension} coordinates, got shape {q.shape}")
        return q

    def evaluate(self, q: np.ndarray, rows=slice(None)) -> np.ndarray:
        q = self._check(q)
        u = self.u_ref[rows] + self.V[rows] @ q
        if self.h_bar is not None:
            u = u + self.h_bar[rows] @ unique_kron(q)
        return u

    def evaluate_many(self, qs: np.ndarray) -> np.ndarray:
        """States for every column of ``qs`` (n x m)."""
        u = self.u_ref[:, None] + self.V @ qs
        if self.h_bar is not None:
            u += self.h_bar @ unique_kron_columns(qs)
        return u

    def tangent(self, q: np.ndarray, rows=slice(None)) -> np.ndarray:
        q = self._check(q)
        t = self.V[rows]
        if self.h_bar is not None:
            t = t + self.h_bar[rows] @ unique_kron_tangent(q)
        return t

    def project(self, u: np.ndarray) -> np.ndarray:
        return self.V.T @ (np.asarray(u, dtype=float) - self.u_ref)

    def invert(self, u: np.ndarray, max_iters: int = 50, q0: np.ndarray | None = None) -> np.ndarray:
        """Coordinates whose image is closest to ``u`` (Gauss-Newton).

        Starts from the orthogonal projection; each update applies the
        pseudoinverse of the tangent to the mismatch ``u(q) - u``.
        """
        u = np.asarray(u, dtype=float)
        q = self.project(u) if q0 is None else np.array(q0, dtype=float)
        if self.h_bar is None:
            return q
        n = self.dimension
        for _ in range(max_iters):
            delta = self.evaluate(q) - u
            t = self.tangent(q)
            if np.linalg.norm(t.T @ delta) <= 1e-10 * n:
                return q
            step = np.linalg.lstsq(t, delta, rcond=None)[0]
            q = q - step
            if np.linalg.norm(step) <= 1e-12:
                return q
        delta = self.evaluate(q) - u
        raise InversionError(f"manifold inversion did not converge in {max_iters} iterations "
                             f"(mismatch {np.linalg.norm(delta):.3e})", q, float(np.linalg.norm(delta)))

    def checksum(self) -> str:
        arrays = [self.u_ref, self.V.ravel(order="F"), self.basis.singular_values]
        if self.h_bar is not None:
            arrays.append(self.h_bar.ravel(order="F"))
        return payload_digest(*arrays)


def affine_manifold(basis: ReducedBasis, u_ref: np.ndarray) -> Manifold:
    return Manifold(basis, np.asarray(u_ref, dtype=float))


def build_intermediates(snaps: SnapshotSet, basis: ReducedBasis) -> BuildIntermediates:
    v = basis.basis
    centered = snaps.centered()
    q = v.T @ centered
    e = centered - v @ q
    features = unique_kron_columns(q)
    if not np.any(features):
        raise ValueError("degenerate generalized coordinates")
    return BuildIntermediates(e, features, thin_svd(features), q)


def alpha_grid(svd: ThinSvd, omega: float) -> np.ndarray:
    """``ceil(omega k)`` log-spaced trial values from sigma_max down to sigma_min."""
    if not 0 < omega <= 1:
        raise ValueError("omega must lie in (0, 1]")
    n_smp = math.ceil(omega * svd.rank)
    s = svd.singular_values
    return np.geomspace(s[0], s[-1], n_smp)


def select_alpha_gcv(inter: BuildIntermediates, omega: float) -> tuple[float, np.ndarray]:
    """Most frequent per-row GCV minimizer over the trial grid.

    Returns ``(alpha_star, per_row_choice_index)``. Grid and mode ties both
    resolve toward the larger alpha.
    """
    grid = alpha_grid(inter.feature_svd, omega)
    svd = inter.feature_svd
    rows = inter.error_matrix
    beta = rows @ svd.right
    outside = np.maximum(np.einsum("ij,ij->i", rows, rows) - np.einsum("ij,ij->i", beta, beta), 0.0)
    scores = np.column_stack([gcv_scores(svd, rows, a, beta, outside) for a in grid])
    best = np.argmin(scores, axis=1)
    counts = np.bincount(best, minlength=grid.size)
    # grid runs from large to small alpha, so argmax's first hit is the larger alpha
    return float(grid[int(np.argmax(counts))]), best


def solve_rows(svd: ThinSvd, error_matrix: np.ndarray, alpha: float,
               order: np.ndarray | None = None, workers: int = 1) -> np.ndarray:
    """Solve every row problem independently, optionally in threads."""
    n_rows = error_matrix.shape[0]
    h_bar = np.empty((n_rows, svd.left.shape[0]))
    order = np.arange(n_rows) if order is None else np.asarray(order)

    def work(i):
        h_bar[i] = tikhonov_row_solve(svd, error_matrix[i], alpha)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(work, order))
    else:
        for i in order:
            work(i)
    return h_bar


def build_quadratic(snaps: SnapshotSet, basis: ReducedBasis, omega: float = 0.1,
                    alpha_star: float | None = None, workers: int = 1,
                    record: dict | None = None) -> Manifold:
    """Fit the quadratic coefficients row by row with a common Tikhonov alpha.

    ``alpha_star`` skips the GCV sweep when given.
    """
    if basis.dimension < 1:
        raise ValueError("basis must have at least one column")
    inter = build_intermediates(snaps, basis)
    svd = inter.feature_svd
    rec = dict(record or {})
    rec.update(omega=omega, sigma_min=float(svd.singular_values[-1]),
               sigma_max=float(svd.singular_values[0]))
    if alpha_star is None:
        alpha_star, _ = select_alpha_gcv(inter, omega)
        rec["alpha_override"] = 0.0
    else:
        if alpha_star < 0:
            raise ValueError("negative regularization")
        rec["alpha_override"] = 1.0
    rec["alpha_star"] = float(alpha_star)
    h_bar = solve_rows(svd, inter.error_matrix, alpha_star, workers=workers)
    log.info("quadratic manifold: n=%d, alpha*/sigma_1=%.3e", basis.dimension,
             alpha_star / svd.singular_values[0])
    return Manifold(basis, snaps.u_ref.copy(), h_bar, rec)


def save_manifold(man: Manifold, path) -> None:
    n, N = man.dimension, man.state_dimension
    header = (f"{MAN_MAGIC} v1 N={N} n={n} kind={man.kind} "
              f"sha256={man.checksum()}\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for arr in (man.u_ref, man.V.ravel(order="F"), man.basis.singular_values,
                    np.array([man.basis.discarded_energy])):
            fh.write(np.asarray(arr, dtype=FLOAT).tobytes())
        if man.h_bar is not None:
            rec = np.array([man.build_record.get(k, np.nan) for k in RECORD_FIELDS], dtype=float)
            fh.write(man.h_bar.ravel(order="F").astype(FLOAT).tobytes())
            fh.write(rec.astype(FLOAT).tobytes())


def load_manifold(path) -> Manifold:
    buf = Path(path).read_bytes()
    end = buf.find(b"\n")
    if end < 0:
        raise FormatError("malformed header: no newline")
    fields = parse_header(buf[:end], MAN_MAGIC)
    try:
        N, n, kind = int(fields["N"]), int(fields["n"]), fields["kind"]
    except (KeyError, ValueError) as exc:
        raise FormatError("malformed header: N, n and kind are required") from exc
    if kind not in ("affine", "quadratic"):
        raise FormatError(f"unknown manifold kind {kind!r}")
    off = end + 1
    u_ref, off = read_floats(buf, off, N, "u_ref")
    v, off = read_floats(buf, off, N * n, "basis")
    sigma, off = read_floats(buf, off, n, "singular values")
    disc, off = read_floats(buf, off, 1, "discarded energy")
    h_bar, rec = None, {}
    if kind == "quadratic":
        h, off = read_floats(buf, off, N * feature_count(n), "quadratic coefficients")
        r, off = read_floats(buf, off, len(RECORD_FIELDS), "build record")
        h_bar = h.reshape((N, feature_count(n)), order="F")
        rec = {k: float(x) for k, x in zip(RECORD_FIELDS, r) if not np.isnan(x)}
    if off != len(buf):
        raise FormatError(f"dimension mismatch: {len(buf) - off} trailing bytes")
    basis = ReducedBasis(v.reshape((N, n), order="F"), sigma, float(disc[0]))
    man = Manifold(basis, u_ref, h_bar, rec)
    if "sha256" in fields and fields["sha256"] != man.checksum():
        raise FormatError("checksum mismatch")
    return man
