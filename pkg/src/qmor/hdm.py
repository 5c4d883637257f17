"""Finite-volume high-dimensional model ``M du/dt + f(u) - g(t) = 0``.

The benchmark is 1D inviscid Burgers (or linear advection) on a uniform
grid with a fixed inflow value at the left boundary and a first-order
upwind flux. Upwinding assumes a positive wave speed, so every cell only
depends on itself and its left neighbour; each cell is one mesh entity
owning one dof.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .snapshots import SnapshotSet

log = logging.getLogger(__name__)

BDF_SCHEMES = ("bdf1", "bdf2")


class NewtonError(RuntimeError):
    def __init__(self, message: str, step: int, residual_norm: float):
        super().__init__(message)
        self.step = step
        self.residual_norm = residual_norm


def bdf_coefficients(scheme: str, n_history: int) -> tuple[float, tuple[float, ...]]:
    """Coefficients ``(c0, (c1, c2...))`` with du/dt ~ (c0 u + sum ck u_hist_k) / dt.

    BDF2 without a second history state falls back to BDF1.
    """
    if scheme not in BDF_SCHEMES:
        raise ValueError(f"unknown time scheme {scheme!r}")
    if n_history < 1:
        raise ValueError("time discretization needs at least one history state")
    if scheme == "bdf2" and n_history >= 2:
        return 1.5, (-2.0, 0.5)
    return 1.0, (-1.0,)


@dataclass(frozen=True)
class TimeDiscretization:
    """Implicit BDF stepping with a fixed ``dt``; history is most recent first."""

    scheme: str
    dt: float
    history: tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        if self.scheme not in BDF_SCHEMES:
            raise ValueError(f"unknown time scheme {self.scheme!r}")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def coefficients(self) -> tuple[float, tuple[float, ...]]:
        return bdf_coefficients(self.scheme, len(self.history))

    def history_term(self, rows=slice(None)) -> np.ndarray:
        """``sum_k c_k u_hist_k`` restricted to ``rows``."""
        _, ck = self.coefficients
        return sum(c * h[rows] for c, h in zip(ck, self.history))

    def advance(self, u_new: np.ndarray) -> "TimeDiscretization":
        keep = 2 if self.scheme == "bdf2" else 1
        return replace(self, history=((u_new,) + self.history)[:keep])


@dataclass(frozen=True)
class MeshEntity:
    id: int
    owned: np.ndarray
    stencil: np.ndarray

    @property
    def owned_dof_count(self) -> int:
        return self.owned.size


def _check_finite(u):
    if not np.all(np.isfinite(u)):
        raise FloatingPointError("non-finite state")


@dataclass(frozen=True)
class ConservationLaw1D:
    """Upwind finite-volume model of ``u_t + F(u)_x = a exp(b x)``.

    ``flux`` is ``"burgers"`` (F = u^2/2) or ``"advection"`` (F = speed * u).
    """

    cells: int = 512
    length: float = 100.0
    inflow: float = 4.3
    initial_value: float = 1.0
    source_a: float = 0.02
    source_b: float = 0.02
    flux: str = "burgers"
    speed: float = 1.0
    source_fn: object = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.cells < 1:
            raise ValueError("need at least one cell")
        if self.flux not in ("burgers", "advection"):
            raise ValueError(f"unknown flux {self.flux!r}")
        if self.flux == "advection" and self.speed <= 0:
            raise ValueError("upwind flux requires a positive advection speed")

    @property
    def dimension(self) -> int:
        return self.cells

    @property
    def dx(self) -> float:
        return self.length / self.cells

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.cells) + 0.5) * self.dx

    @property
    def mass_diag(self) -> np.ndarray:
        return np.full(self.cells, self.dx)

    @property
    def initial_state(self) -> np.ndarray:
        return np.full(self.cells, float(self.initial_value))

    def entities(self) -> list[MeshEntity]:
        return [self.entity(e) for e in range(self.cells)]

    def entity(self, e: int) -> MeshEntity:
        stencil = np.array([e], dtype=int) if e == 0 else np.array([e - 1, e], dtype=int)
        return MeshEntity(e, np.array([e], dtype=int), stencil)

    def neighbors(self, e: int) -> list[int]:
        """Entities whose stencils overlap with entity ``e``'s stencil."""
        return [int(i) for i in self.entity(e).stencil]

    # pointwise pieces

    def flux_value(self, u):
        if self.flux == "burgers":
            return 0.5 * u * u
        return self.speed * u

    def flux_derivative(self, u):
        if self.flux == "burgers":
            return u
        return np.full_like(np.asarray(u, dtype=float), self.speed)

    def source(self, t: float, x=None) -> np.ndarray:
        """Source density at cell centers (or at ``x``)."""
        x = self.centers if x is None else np.asarray(x, dtype=float)
        if self.source_fn is not None:
            return np.asarray(self.source_fn(x, t), dtype=float)
        return self.source_a * np.exp(self.source_b * x)

    def f(self, u: np.ndarray) -> np.ndarray:
        fl = self.flux_value(u)
        out = fl.copy()
        out[1:] -= fl[:-1]
        return out

    def g(self, t: float) -> np.ndarray:
        out = self.dx * self.source(t)
        out[0] += self.flux_value(self.inflow)
        return out

    # discrete residual and Jacobian

    def discrete_residual(self, u_new: np.ndarray, t_new: float,
                          td: TimeDiscretization) -> np.ndarray:
        _check_finite(u_new)
        c0, _ = td.coefficients
        dudt = (c0 * u_new + td.history_term()) / td.dt
        return self.mass_diag * dudt + self.f(u_new) - self.g(t_new)

    def jacobian(self, u_new: np.ndarray, t_new: float,
                 td: TimeDiscretization) -> sp.csr_matrix:
        _check_finite(u_new)
        c0, _ = td.coefficients
        a = self.flux_derivative(u_new)
        diag = self.mass_diag * c0 / td.dt + a
        return sp.diags([diag, -a[:-1]], [0, -1], format="csr")

    def entity_residual(self, e: int, u_stencil: np.ndarray, t: float,
                        td: TimeDiscretization) -> np.ndarray:
        u_stencil = np.asarray(u_stencil, dtype=float)
        _check_finite(u_stencil)
        u_own = u_stencil[-1]
        upstream = self.inflow if e == 0 else u_stencil[0]
        c0, _ = td.coefficients
        hist = td.history_term(e) if td.history else 0.0
        x = self.centers[e]
        r = (self.dx * (c0 * u_own + hist) / td.dt
             + self.flux_value(u_own) - self.flux_value(upstream)
             - self.dx * self.source(t, x))
        return np.atleast_1d(r)

    def entity_jacobian(self, e: int, u_stencil: np.ndarray, t: float,
                        td: TimeDiscretization) -> np.ndarray:
        u_stencil = np.asarray(u_stencil, dtype=float)
        _check_finite(u_stencil)
        c0, _ = td.coefficients
        own = self.dx * c0 / td.dt + float(self.flux_derivative(u_stencil[-1]))
        if e == 0:
            return np.array([[own]])
        return np.array([[-float(self.flux_derivative(u_stencil[0])), own]])

    def entity_batch(self, ids: np.ndarray, u_up: np.ndarray, u_own: np.ndarray,
                     hist_own, t: float, td: TimeDiscretization):
        """Residuals and Jacobian rows of many entities at once.

        ``u_up`` holds the left-neighbour value (ignored for entity 0, which
        sees the inflow). Returns ``(r, d_up, d_own)`` where ``d_up`` is zero
        for entity 0.
        """
        ids = np.asarray(ids)
        _check_finite(u_own)
        first = ids == 0
        up = np.where(first, self.inflow, u_up)
        _check_finite(up)
        c0, _ = td.coefficients
        r = (self.dx * (c0 * u_own + hist_own) / td.dt
             + self.flux_value(u_own) - self.flux_value(up)
             - self.dx * self.source(t, self.centers[ids]))
        d_own = self.dx * c0 / td.dt + self.flux_derivative(u_own)
        d_up = np.where(first, 0.0, -self.flux_derivative(up))
        return r, d_up, d_own

    def assemble_from_entities(self, u: np.ndarray, t: float,
                               td: TimeDiscretization) -> np.ndarray:
        """Global residual as the scattered sum of entity contributions."""
        r = np.zeros(self.dimension)
        for ent in self.entities():
            r[ent.owned] += self.entity_residual(ent.id, u[ent.stencil], t, td)
        return r


@dataclass(frozen=True)
class NewtonSettings:
    tol_rel: float = 1e-8
    tol_abs: float = 1e-12
    max_iters: int = 25


def newton_solve(model, u_guess: np.ndarray, t_new: float, td: TimeDiscretization,
                 settings: NewtonSettings = NewtonSettings(), step: int = 0):
    """Full-step Newton on the discrete residual; returns ``(u, iterations)``."""
    u = np.array(u_guess, dtype=float)
    r = model.discrete_residual(u, t_new, td)
    r0 = np.linalg.norm(r)
    tol = settings.tol_abs + settings.tol_rel * r0
    rn = r0
    for it in range(settings.max_iters + 1):
        if rn <= tol:
            return u, it
        if it == settings.max_iters:
            break
        jac = model.jacobian(u, t_new, td)
        u = u - spla.spsolve(jac.tocsc(), r)
        r = model.discrete_residual(u, t_new, td)
        rn = np.linalg.norm(r)
    raise NewtonError(f"Newton failed at step {step}: residual {rn:.3e} > {tol:.3e}",
                      step, rn)


@dataclass
class HdmRun:
    snapshots: SnapshotSet
    times: np.ndarray
    states: np.ndarray
    max_newton_iterations: int


def hdm_simulate(model, td: TimeDiscretization, t_final: float, snapshot_stride: int = 1,
                 settings: NewtonSettings = NewtonSettings(),
                 keep_states: bool = False) -> HdmRun:
    """Integrate from the initial state to ``t_final``.

    Snapshots (including the initial state) are kept every ``snapshot_stride``
    steps; the reference state is the initial condition. ``t_final == 0``
    yields a single snapshot.
    """
    if t_final < 0:
        raise ValueError("t_final must be nonnegative")
    if snapshot_stride < 1:
        raise ValueError("snapshot_stride must be >= 1")
    n_steps = int(round(t_final / td.dt))
    u0 = np.asarray(model.initial_state, dtype=float)
    u = u0.copy()
    td = replace(td, history=(u0,))
    snaps, snap_t = [u0.copy()], [0.0]
    all_states = [u0.copy()] if keep_states else None
    worst = 0
    for m in range(1, n_steps + 1):
        t_new = m * td.dt
        u, its = newton_solve(model, u, t_new, td, settings, step=m)
        worst = max(worst, its)
        td = td.advance(u)
        if m % snapshot_stride == 0:
            snaps.append(u.copy())
            snap_t.append(t_new)
        if keep_states:
            all_states.append(u.copy())
    log.info("HDM: %d steps, worst Newton count %d", n_steps, worst)
    snapset = SnapshotSet(np.column_stack(snaps), np.array(snap_t), u0.copy())
    times = np.arange(n_steps + 1) * td.dt
    states = np.column_stack(all_states) if keep_states else None
    return HdmRun(snapset, times, states, worst)
