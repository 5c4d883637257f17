"""LSPG reduced-order models on affine or quadratic manifolds.

Each implicit step minimizes ``||r(u(q), t)||_2`` over the coordinates with
Gauss-Newton. The left basis at an iterate is ``W = J(u(q)) T(q)`` with
``T`` the manifold tangent. The hyperreduced variant replaces every
contraction with a weighted sum over the reduced mesh, touching only the
rows of the augmented mesh.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .hdm import TimeDiscretization
from .manifold import unique_kron_columns

log = logging.getLogger(__name__)


class LspgError(RuntimeError):
    def __init__(self, message: str, iterates=(), time: float | None = None):
        super().__init__(message)
        self.iterates = list(iterates)
        self.time = time


@dataclass(frozen=True)
class LspgConfig:
    gn_tol_rel: float = 1e-8
    gn_tol_abs: float = 1e-12
    gn_max_iters: int = 25

    def __post_init__(self):
        if self.gn_tol_rel <= 0 or self.gn_tol_abs <= 0:
            raise ValueError("Gauss-Newton tolerances must be positive")
        if self.gn_max_iters < 1:
            raise ValueError("gn_max_iters must be >= 1")


@dataclass
class StepInfo:
    iterations: int
    iterates: list


def _solve_full(w: np.ndarray, r: np.ndarray) -> np.ndarray:
    qmat, rmat = np.linalg.qr(w)
    diag = np.abs(np.diag(rmat))
    if diag.size == 0 or diag.min() <= 1e-13 * max(diag.max(), 1e-300):
        raise LspgError("tangent rank collapse")
    return -np.linalg.solve(rmat, qmat.T @ r)


def lspg_step(manifold, model, q_m: np.ndarray, td: TimeDiscretization, t_new: float,
              cfg: LspgConfig = LspgConfig(), info: StepInfo | None = None) -> np.ndarray:
    """One unreduced LSPG step; ``td`` carries the reconstructed history states."""
    q = np.array(q_m, dtype=float)
    iterates = [q.copy()]
    tol = None
    for it in range(cfg.gn_max_iters + 1):
        u = manifold.evaluate(q)
        r = model.discrete_residual(u, t_new, td)
        w = model.jacobian(u, t_new, td) @ manifold.tangent(q)
        g = np.linalg.norm(w.T @ r)
        if tol is None:
            tol = cfg.gn_tol_rel * g + cfg.gn_tol_abs
        if g <= tol:
            if info is not None:
                info.iterations, info.iterates = it, iterates
            return q
        if it == cfg.gn_max_iters:
            break
        q = q + _solve_full(w, r)
        iterates.append(q.copy())
    raise LspgError(f"LSPG Gauss-Newton did not converge at t={t_new:g} "
                    f"(|W^T r|={g:.3e} > {tol:.3e})", iterates, t_new)


@dataclass(frozen=True)
class HyperContext:
    """Index bookkeeping that maps the reduced mesh onto augmented-mesh rows."""

    ids: np.ndarray
    weights: np.ndarray
    rows: np.ndarray
    own_pos: np.ndarray
    up_pos: np.ndarray

    @classmethod
    def build(cls, model, mesh) -> "HyperContext":
        ids = np.asarray(mesh.entities, dtype=int)
        rows = np.asarray(mesh.augmented, dtype=int)
        where = {int(r): k for k, r in enumerate(rows)}
        own = np.array([where[int(e)] for e in ids], dtype=int)
        up = np.array([where[int(e) - 1] if e > 0 else own[k] for k, e in enumerate(ids)],
                      dtype=int)
        return cls(ids, np.asarray(mesh.weights_on(ids), dtype=float), rows, own, up)


def hyper_lspg_step(manifold, model, q_m: np.ndarray, td: TimeDiscretization, t_new: float,
                    cfg: LspgConfig, ctx: HyperContext,
                    info: StepInfo | None = None) -> np.ndarray:
    """LSPG step with ECSW-weighted residual and Jacobian contractions.

    ``td.history`` holds reconstructed states restricted to ``ctx.rows``.
    """
    if ctx.ids.size == 0:
        raise LspgError("singular hyperreduced system")
    q = np.array(q_m, dtype=float)
    iterates = [q.copy()]
    c0, ck = td.coefficients
    hist_own = sum(c * h[ctx.own_pos] for c, h in zip(ck, td.history))
    tol = None
    for it in range(cfg.gn_max_iters + 1):
        u = manifold.evaluate(q, ctx.rows)
        t_aug = manifold.tangent(q, ctx.rows)
        r, d_up, d_own = model.entity_batch(ctx.ids, u[ctx.up_pos], u[ctx.own_pos],
                                            hist_own, t_new, td)
        jt = d_own[:, None] * t_aug[ctx.own_pos] + d_up[:, None] * t_aug[ctx.up_pos]
        gmat = (jt * ctx.weights[:, None]).T @ jt
        b = -(jt.T @ (ctx.weights * r))
        g = np.linalg.norm(b)
        if tol is None:
            tol = cfg.gn_tol_rel * g + cfg.gn_tol_abs
        if g <= tol:
            if info is not None:
                info.iterations, info.iterates = it, iterates
            return q
        if it == cfg.gn_max_iters:
            break
        try:
            chol = np.linalg.cholesky(gmat)
        except np.linalg.LinAlgError as exc:
            raise LspgError("singular hyperreduced system", iterates, t_new) from exc
        if np.min(np.abs(np.diag(chol))) <= 1e-13 * np.max(np.abs(np.diag(chol))):
            raise LspgError("singular hyperreduced system", iterates, t_new)
        y = np.linalg.solve(chol, b)
        q = q + np.linalg.solve(chol.T, y)
        iterates.append(q.copy())
    raise LspgError(f"hyperreduced Gauss-Newton did not converge at t={t_new:g} "
                    f"(|W^T r|={g:.3e} > {tol:.3e})", iterates, t_new)


@dataclass
class RomTrajectory:
    coordinates: np.ndarray
    times: np.ndarray
    probes: np.ndarray
    probe_cells: tuple[int, ...]
    integral: np.ndarray
    iterations: np.ndarray

    def qoi_table(self) -> dict[str, np.ndarray]:
        out = {f"probe_{c}": self.probes[k] for k, c in enumerate(self.probe_cells)}
        out["integral_qoi"] = self.integral
        return out


def default_probes(n_cells: int) -> tuple[int, int]:
    return n_cells // 2, (3 * n_cells) // 4


def run_rom(manifold, model, td: TimeDiscretization, t_final: float, probes=None,
            cfg: LspgConfig = LspgConfig(), mesh=None, u0: np.ndarray | None = None,
            integral_qoi: bool = True) -> RomTrajectory:
    """March an LSPG ROM (hyperreduced when ``mesh`` is given) to ``t_final``.

    Initial coordinates come from inverting the initial state. QoIs are
    probe values and the domain integral of the reconstructed state; the
    integral needs every row, so hyperreduced runs reconstruct it from the
    stored coordinates after the march rather than inside it.
    """
    probes = tuple(default_probes(model.dimension) if probes is None else probes)
    u0 = np.asarray(model.initial_state if u0 is None else u0, dtype=float)
    q = manifold.invert(u0)
    n_steps = int(round(t_final / td.dt))
    coords = [q.copy()]
    iters = [0]
    info = StepInfo(0, [])
    try:
        _march(manifold, model, td, q, n_steps, cfg, mesh, coords, iters, info)
    except LspgError as exc:
        exc.partial_coordinates = np.column_stack(coords)
        raise
    coords = np.column_stack(coords)
    times = np.arange(n_steps + 1) * td.dt
    if probes:
        probe_vals = np.vstack([_row_history(manifold, coords, p) for p in probes])
    else:
        probe_vals = np.zeros((0, times.size))
    integral = (model.dx * manifold.evaluate_many(coords).sum(axis=0)
                if integral_qoi else np.full(times.size, np.nan))
    return RomTrajectory(coords, times, probe_vals, probes, integral, np.array(iters))


def _march(manifold, model, td, q, n_steps, cfg, mesh, coords, iters, info):
    if mesh is None:
        hist = (manifold.evaluate(q),)
        step_td = replace(td, history=hist)
        for m in range(1, n_steps + 1):
            t_new = m * td.dt
            q = lspg_step(manifold, model, q, step_td, t_new, cfg, info)
            step_td = step_td.advance(manifold.evaluate(q))
            coords.append(q.copy())
            iters.append(info.iterations)
    else:
        ctx = HyperContext.build(model, mesh)
        step_td = replace(td, history=(manifold.evaluate(q, ctx.rows),))
        for m in range(1, n_steps + 1):
            t_new = m * td.dt
            q = hyper_lspg_step(manifold, model, q, step_td, t_new, cfg, ctx, info)
            step_td = step_td.advance(manifold.evaluate(q, ctx.rows))
            coords.append(q.copy())
            iters.append(info.iterations)


def _row_history(manifold, coords, row):
    vals = manifold.u_ref[row] + manifold.V[row] @ coords
    if manifold.h_bar is not None:
        vals = vals + manifold.h_bar[row] @ unique_kron_columns(coords)
    return vals


def relative_error(qoi_rom, qoi_hdm) -> float:
    """Root-sum-square mismatch normalized by the reference series."""
    a = np.asarray(qoi_rom, dtype=float)
    b = np.asarray(qoi_hdm, dtype=float)
    if a.shape != b.shape:
        raise ValueError("series lengths differ")
    den = np.sqrt(np.sum(b * b))
    if den == 0:
        raise ValueError("zero reference QoI")
    return float(np.sqrt(np.sum((a - b) ** 2)) / den)
