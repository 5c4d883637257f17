"""ECSW training: cubature system assembly and reduced-mesh selection."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .hdm import TimeDiscretization
from .manifold import InversionError
from .numerics import nnls_early_stop
from .snapshots import FormatError

log = logging.getLogger(__name__)

MESH_MAGIC = "QMOR-MESH"


@dataclass(frozen=True)
class TrainingCoordinates:
    """Manifold coordinates of the training snapshots and their predecessors.

    ``history[k]`` lists the coordinates of the snapshots preceding training
    snapshot ``k`` (most recent first, at most two).
    """

    indices: np.ndarray
    times: np.ndarray
    coords: np.ndarray
    history: tuple[tuple[np.ndarray, ...], ...]
    dt: float


@dataclass(frozen=True)
class TrainingSystem:
    c: np.ndarray
    d: np.ndarray
    indices: np.ndarray


@dataclass(frozen=True)
class ReducedMesh:
    n_entities: int
    entities: np.ndarray
    weights: np.ndarray
    augmented: np.ndarray
    tau: float
    achieved_ratio: float
    manifold_dimension: int | None = None
    manifold_checksum: str | None = None
    nnls_seconds: float = 0.0

    @property
    def size(self) -> int:
        return int(self.entities.size)

    def weights_on(self, ids) -> np.ndarray:
        lookup = dict(zip(self.entities.tolist(), self.weights.tolist()))
        return np.array([lookup[int(i)] for i in ids])

    def dense_weights(self) -> np.ndarray:
        out = np.zeros(self.n_entities)
        out[self.entities] = self.weights
        return out


def training_indices(n_snapshots: int, stride: int) -> np.ndarray:
    """Every ``stride``-th column counted back from the last snapshot."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    idx = np.arange(n_snapshots - 1, -1, -stride)[::-1]
    assert idx.size == math.ceil(n_snapshots / stride)
    return idx


def _coords_of(manifold, snaps, l, cache):
    if l not in cache:
        try:
            cache[l] = manifold.invert(snaps.states[:, l])
        except InversionError as exc:
            raise InversionError(f"snapshot {l}: {exc}", exc.q, exc.residual_norm) from exc
    return cache[l]


def training_coordinates(manifold, snaps, stride: int = 4,
                         scheme: str = "bdf2") -> TrainingCoordinates:
    """Coordinates of training snapshots (projection if affine, inversion if quadratic)."""
    idx = training_indices(snaps.count, stride)
    depth = 2 if scheme == "bdf2" else 1
    cache: dict[int, np.ndarray] = {}
    coords, history = [], []
    for l in idx:
        coords.append(_coords_of(manifold, snaps, int(l), cache))
        prev = [int(k) for k in range(l - 1, max(l - 1 - depth, -1), -1)]
        history.append(tuple(_coords_of(manifold, snaps, k, cache) for k in prev))
    if snaps.count > 1:
        dts = np.diff(snaps.times)
        dt = float(dts[0])
        if not np.allclose(dts, dt, rtol=1e-9):
            raise ValueError("ECSW training needs uniformly spaced snapshots")
    else:
        dt = 1.0
    return TrainingCoordinates(idx, snaps.times[idx], np.column_stack(coords),
                               tuple(history), dt)


def build_training_system(manifold, model, tc: TrainingCoordinates,
                          scheme: str = "bdf2") -> TrainingSystem:
    """Assemble C (N_h n x N_e) and d = C 1 from manifold-consistent states.

    Block row l holds, for every entity, ``(L_e W_l)^T r_e`` with
    ``W_l = J(u_l) T(q_l)``. A training snapshot without predecessors is
    treated as at rest (BDF1 with itself as history).
    """
    n = manifold.dimension
    n_e = model.dimension
    ids = np.arange(n_e)
    blocks, checks = [], []
    for k, l in enumerate(tc.indices):
        q = tc.coords[:, k]
        u = manifold.evaluate(q)
        hist = tuple(manifold.evaluate(h) for h in tc.history[k]) or (u,)
        td = TimeDiscretization(scheme, tc.dt, hist)
        t_l = float(tc.times[k])
        tangent = manifold.tangent(q)
        up = np.concatenate(([u[0]], u[:-1]))
        r, d_up, d_own = model.entity_batch(ids, up, u, td.history_term(), t_l, td)
        t_up = np.vstack([tangent[:1], tangent[:-1]])
        # row e of W = J T is the entity's Jacobian row applied to its stencil rows
        w = d_own[:, None] * tangent + d_up[:, None] * t_up
        block = (w * r[:, None]).T
        if not np.all(np.isfinite(block)):
            bad = np.argwhere(~np.isfinite(block))[0]
            raise FloatingPointError(f"non-finite training entry at snapshot {l}, entity {bad[1]}")
        blocks.append(block)
        # independent global assembly of W^T r
        w_glob = model.jacobian(u, t_l, td) @ tangent
        checks.append(w_glob.T @ model.discrete_residual(u, t_l, td))
    c = np.vstack(blocks) if blocks else np.zeros((0, n_e))
    d = np.concatenate(checks) if checks else np.zeros(0)
    if np.linalg.norm(c @ np.ones(n_e) - d) > 1e-10 * max(np.linalg.norm(d), 1e-300):
        raise AssertionError("training system violates d = C 1")
    assert c.shape == (tc.indices.size * n, n_e)
    return TrainingSystem(c, d, tc.indices.copy())


def augment(model, entities) -> np.ndarray:
    rows = set()
    for e in entities:
        rows.update(int(i) for i in model.entity(int(e)).stencil)
    return np.array(sorted(rows), dtype=int)


def train_reduced_mesh(system: TrainingSystem, tau: float, model,
                       manifold=None, max_passes: int | None = None) -> ReducedMesh:
    """Select entities and weights by NNLS with early termination at ``tau``."""
    if not 0 < tau < 1:
        raise ValueError("tau must lie in (0, 1)")
    t0 = time.perf_counter()
    sol = nnls_early_stop(system.c, system.d, tau, max_passes=max_passes)
    elapsed = time.perf_counter() - t0
    support = sol.support
    ratio = sol.residual_norm / np.linalg.norm(system.d)
    log.info("ECSW: n_e=%d of %d, ratio %.3e, %.2fs", support.size, system.c.shape[1],
             ratio, elapsed)
    return ReducedMesh(system.c.shape[1], support, sol.weights[support], augment(model, support),
                       tau, float(ratio),
                       None if manifold is None else manifold.dimension,
                       None if manifold is None else manifold.checksum(), elapsed)


def full_mesh(model, manifold=None) -> ReducedMesh:
    """Unit weights on every entity (exact cubature)."""
    ids = np.arange(model.dimension)
    return ReducedMesh(model.dimension, ids, np.ones(ids.size), ids, 0.0, 0.0,
                       None if manifold is None else manifold.dimension,
                       None if manifold is None else manifold.checksum())


def save_mesh(mesh: ReducedMesh, path) -> None:
    head = f"{MESH_MAGIC} v1 Ne={mesh.n_entities} ne={mesh.size} tau={mesh.tau!r}"
    head += f" ratio={mesh.achieved_ratio!r}"
    if mesh.manifold_dimension is not None:
        head += f" n={mesh.manifold_dimension}"
    if mesh.manifold_checksum is not None:
        head += f" manifold={mesh.manifold_checksum}"
    lines = [head]
    lines += [f"{int(e)} {w!r}" for e, w in zip(mesh.entities, mesh.weights.tolist())]
    lines.append("augmented " + " ".join(str(int(i)) for i in mesh.augmented))
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path) -> ReducedMesh:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError("empty mesh file")
    parts = lines[0].split()
    if len(parts) < 2 or parts[0] != MESH_MAGIC or parts[1] != "v1":
        raise FormatError(f"malformed header: expected '{MESH_MAGIC} v1 ...'")
    fields = dict(tok.split("=", 1) for tok in parts[2:] if "=" in tok)
    try:
        n_total, n_sel, tau = int(fields["Ne"]), int(fields["ne"]), float(fields["tau"])
    except (KeyError, ValueError) as exc:
        raise FormatError("malformed header: Ne, ne and tau are required") from exc
    body = lines[1:]
    if len(body) != n_sel + 1 or not body[-1].startswith("augmented"):
        raise FormatError(f"expected {n_sel} weight lines and an augmented list")
    ents, wts = [], []
    for line in body[:-1]:
        e, w = line.split()
        ents.append(int(e))
        wts.append(float(w))
    aug = [int(x) for x in body[-1].split()[1:]]
    return ReducedMesh(n_total, np.array(ents, dtype=int), np.array(wts), np.array(aug, dtype=int),
                       tau, float(fields.get("ratio", "nan")),
                       int(fields["n"]) if "n" in fields else None, fields.get("manifold"))
