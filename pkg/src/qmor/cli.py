"""Batch pipeline: hdm-run, build-affine, build-quadratic, ecsw-train, rom-run, compare.

Stages hand off through files. Exit codes: 0 success, 1 user/config error,
2 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import ecsw
from .hdm import ConservationLaw1D, NewtonError, NewtonSettings, TimeDiscretization, hdm_simulate
from .manifold import (InversionError, Manifold, affine_manifold, build_quadratic,
                       dimension_heuristic, load_manifold, save_manifold, snapshot_cap)
from .numerics import NnlsError
from .rom import LspgConfig, LspgError, default_probes, relative_error, run_rom
from .snapshots import (FormatError, SnapshotSet, load_snapshots, pod_basis,
                        save_snapshots)


class UserError(Exception):
    """Bad configuration, missing or mismatched input: exit code 1."""


NUMERICAL_ERRORS = (NewtonError, LspgError, InversionError, NnlsError, FloatingPointError,
                    np.linalg.LinAlgError, ValueError, AssertionError)


@dataclass
class PipelineConfig:
    # benchmark
    cells: int = 512
    length: float = 100.0
    dt: float = 0.05
    t_final: float = 25.0
    scheme: str = "bdf2"
    snapshot_stride: int = 1
    newton_tol: float = 1e-8
    newton_max_iters: int = 25
    inflow: float = 4.3
    initial_value: float = 1.0
    source_a: float = 0.02
    source_b: float = 0.02
    flux: str = "burgers"
    # reduction
    epsilon_s: float = 1e-4
    zeta: float = 0.15
    omega: float = 0.1
    alpha_star: float | None = None
    tau: float = 1e-2
    training_stride: int = 4
    gn_tol_rel: float = 1e-8
    gn_tol_abs: float = 1e-12
    gn_max_iters: int = 25
    probes: str = ""
    # artifacts
    snapshots: str = "snapshots.qsnap"
    manifold: str = "manifold.qman"
    mesh: str = "mesh.qmesh"
    trajectory: str = "trajectory.csv"
    hdm_trajectory: str = "hdm_trajectory.csv"

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or not key:
                raise UserError(f"config line {lineno}: expected 'key = value'")
            if key not in types:
                raise UserError(f"unknown config key '{key}'")
            values[key] = _coerce(key, types[key], value)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        if path is None:
            return cls()
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise UserError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)

    def model(self) -> ConservationLaw1D:
        return ConservationLaw1D(cells=self.cells, length=self.length, inflow=self.inflow,
                                 initial_value=self.initial_value, source_a=self.source_a,
                                 source_b=self.source_b, flux=self.flux)

    def time_discretization(self) -> TimeDiscretization:
        return TimeDiscretization(self.scheme, self.dt)

    def newton(self) -> NewtonSettings:
        return NewtonSettings(tol_rel=self.newton_tol, max_iters=self.newton_max_iters)

    def lspg(self) -> LspgConfig:
        return LspgConfig(self.gn_tol_rel, self.gn_tol_abs, self.gn_max_iters)

    def probe_cells(self) -> tuple[int, ...]:
        if not self.probes.strip():
            return default_probes(self.cells)
        cells = tuple(int(p) for p in self.probes.split(","))
        if any(not 0 <= c < self.cells for c in cells):
            raise UserError("probe cell outside the mesh")
        return cells


def _coerce(key, typ, value):
    typ = str(typ)
    try:
        if "None" in typ:
            return None if value.lower() in ("", "none", "gcv") else float(value)
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        return value
    except ValueError as exc:
        raise UserError(f"config key '{key}': cannot parse {value!r}") from exc


# CSV helpers

def write_trajectory_csv(path, times, probe_cells, probes, integral) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", *[f"probe_{c}" for c in probe_cells], "integral_qoi"])
        for k, t in enumerate(times):
            w.writerow([repr(float(t)), *[repr(float(p[k])) for p in probes],
                        repr(float(integral[k]))])


def read_trajectory_csv(path) -> tuple[list[str], np.ndarray]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise UserError(f"cannot read {path}: {exc}") from exc
    if not rows or rows[0][0] != "time":
        raise UserError(f"{path}: not a trajectory CSV")
    data = np.array([[float(x) for x in r] for r in rows[1:]], dtype=float)
    return rows[0], data.reshape(-1, len(rows[0]))


def _qois(model, states, probe_cells):
    probes = [states[c] for c in probe_cells]
    return probes, model.dx * states.sum(axis=0)


# subcommands

def cmd_hdm_run(cfg: PipelineConfig, out: str | None) -> int:
    model = cfg.model()
    t0 = time.perf_counter()
    run = hdm_simulate(model, cfg.time_discretization(), cfg.t_final, cfg.snapshot_stride,
                       cfg.newton(), keep_states=True)
    wall = time.perf_counter() - t0
    snap_path = out or cfg.snapshots
    save_snapshots(run.snapshots, snap_path)
    probes, integral = _qois(model, run.states, cfg.probe_cells())
    write_trajectory_csv(cfg.hdm_trajectory, run.times, cfg.probe_cells(), probes, integral)
    Path(cfg.hdm_trajectory + ".walltime").write_text(f"{wall!r}\n")
    print(f"HDM: N={model.dimension}, {run.times.size - 1} steps, "
          f"N_s={run.snapshots.count} snapshots -> {snap_path}")
    print(f"max Newton iterations per step: {run.max_newton_iterations}")
    print(f"wall-clock: {wall:.3f} s")
    return 0


def _load_snaps(path) -> SnapshotSet:
    if not Path(path).exists():
        raise UserError(f"snapshot file not found: {path}")
    return load_snapshots(path)


def cmd_build(cfg: PipelineConfig, kind: str, snapshots: str | None, out: str | None,
              alpha_star: float | None) -> int:
    snaps = _load_snaps(snapshots or cfg.snapshots)
    basis = pod_basis(snaps, cfg.epsilon_s)
    n_tra = basis.dimension
    out = out or cfg.manifold
    if kind == "affine":
        man = affine_manifold(basis, snaps.u_ref)
        print(f"n_tra = {n_tra} (epsilon_S = {cfg.epsilon_s:g}, "
              f"discarded energy {basis.discarded_energy:.3e})")
    else:
        n_qp, n_q, n = dimension_heuristic(n_tra, cfg.zeta, snaps.count)
        cap = snapshot_cap(snaps.count)
        print(f"n_tra = {n_tra}")
        print(f"n_qua' = {n_qp}")
        print(f"n_qua = {n_q}")
        print(f"n = min({n_q}, {cap}) = {n}")
        alpha = alpha_star if alpha_star is not None else cfg.alpha_star
        record = dict(zeta=cfg.zeta, epsilon=cfg.epsilon_s, n_tra=n_tra,
                      n_qua_prime=n_qp, n_qua=n_q)
        man = build_quadratic(snaps, basis.truncate(min(n, n_tra)), cfg.omega, alpha,
                              record=record)
        rec = man.build_record
        src = "override" if rec["alpha_override"] else f"GCV, omega = {cfg.omega:g}"
        print(f"alpha*/sigma_Q,1 = {rec['alpha_star'] / rec['sigma_max']:.3e} ({src})")
    save_manifold(man, out)
    print(f"{kind} manifold n={man.dimension} -> {out}")
    return 0


def _load_man(path) -> Manifold:
    if not Path(path).exists():
        raise UserError(f"manifold file not found: {path}")
    return load_manifold(path)


def cmd_ecsw_train(cfg: PipelineConfig, manifold: str | None, snapshots: str | None,
                   tau: float | None, out: str | None) -> int:
    man = _load_man(manifold or cfg.manifold)
    snaps = _load_snaps(snapshots or cfg.snapshots)
    model = cfg.model()
    if snaps.dimension != model.dimension or man.state_dimension != model.dimension:
        raise UserError("snapshot/manifold/model dimensions disagree")
    tau = cfg.tau if tau is None else tau
    if not 0 < tau < 1:
        raise UserError("tau must lie in (0, 1)")
    tc = ecsw.training_coordinates(man, snaps, cfg.training_stride, cfg.scheme)
    system = ecsw.build_training_system(man, model, tc, cfg.scheme)
    mesh = ecsw.train_reduced_mesh(system, tau, model, man)
    out = out or cfg.mesh
    ecsw.save_mesh(mesh, out)
    pct = 100.0 * mesh.size / mesh.n_entities
    print(f"n_e = {mesh.size} of N_e = {mesh.n_entities} ({pct:.2f} %), "
          f"augmented {mesh.augmented.size}")
    print(f"achieved ratio = {mesh.achieved_ratio:.3e} (tau = {tau:g})")
    print(f"NNLS time: {mesh.nnls_seconds:.3f} s")
    if mesh.size <= max(1, mesh.n_entities // 100):
        print("warning: reduced mesh is tiny; tau may be too loose", file=sys.stderr)
    return 0


def cmd_rom_run(cfg: PipelineConfig, manifold: str | None, mesh_path: str | None,
                out: str | None, dump_coords: bool) -> int:
    man = _load_man(manifold or cfg.manifold)
    model = cfg.model()
    if man.state_dimension != model.dimension:
        raise UserError("manifold dimension does not match the model")
    mesh = None
    if mesh_path is not None:
        if not Path(mesh_path).exists():
            raise UserError(f"mesh file not found: {mesh_path}")
        mesh = ecsw.load_mesh(mesh_path)
        if (mesh.n_entities != model.dimension
                or (mesh.manifold_dimension is not None and mesh.manifold_dimension != man.dimension)
                or (mesh.manifold_checksum is not None and mesh.manifold_checksum != man.checksum())):
            raise UserError("mesh/manifold mismatch")
    out = out or cfg.trajectory
    probes = cfg.probe_cells()
    td = cfg.time_discretization()
    t0 = time.perf_counter()
    try:
        traj = run_rom(man, model, td, cfg.t_final, probes, cfg.lspg(), mesh)
    except LspgError as exc:
        coords = getattr(exc, "partial_coordinates", None)
        if coords is not None:
            states = man.evaluate_many(coords)
            times = np.arange(coords.shape[1]) * td.dt
            p, integral = _qois(model, states, probes)
            write_trajectory_csv(out, times, probes, p, integral)
            print(f"partial trajectory ({coords.shape[1]} samples) -> {out}", file=sys.stderr)
        raise
    wall = time.perf_counter() - t0
    write_trajectory_csv(out, traj.times, probes, traj.probes, traj.integral)
    label = ("HQPROM" if man.kind == "quadratic" else "HPROM") if mesh else \
        ("QPROM" if man.kind == "quadratic" else "PROM")
    print(f"{label}: n={man.dimension}, {traj.times.size - 1} steps -> {out}")
    print(f"wall-clock: {wall:.3f} s")
    timing = Path(cfg.hdm_trajectory + ".walltime")
    if timing.exists():
        hdm_wall = float(timing.read_text())
        print(f"speed-up vs HDM: {hdm_wall / wall:.2f}x")
    if dump_coords:
        coords_path = out + ".coords.qsnap"
        save_snapshots(SnapshotSet(traj.coordinates, traj.times, np.zeros(man.dimension)),
                       coords_path)
        print(f"coordinates -> {coords_path}")
    return 0


def cmd_compare(hdm_path: str, rom_paths: list[str], out: str) -> int:
    head, ref = read_trajectory_csv(hdm_path)
    rows, long_rows = [], []
    for col, name in enumerate(head[1:], 1):
        long_rows += [("hdm", name, t, v) for t, v in zip(ref[:, 0], ref[:, col])]
    for path in rom_paths:
        h, data = read_trajectory_csv(path)
        if h != head:
            raise UserError(f"{path}: QoI columns differ from {hdm_path}")
        if data.shape != ref.shape or not np.allclose(data[:, 0], ref[:, 0], rtol=0, atol=1e-9):
            raise UserError(f"{path}: time stamps are not aligned with {hdm_path}")
        label = Path(path).stem
        for col, name in enumerate(head[1:], 1):
            rows.append((label, name, relative_error(data[:, col], ref[:, col])))
            long_rows += [(label, name, t, v) for t, v in zip(data[:, 0], data[:, col])]
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rom", "qoi", "relative_error"])
        for label, name, err in rows:
            w.writerow([label, name, repr(err)])
    hist = str(Path(out).with_suffix("")) + "_histories.csv"
    with open(hist, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "qoi", "time", "value"])
        for label, name, t, v in long_rows:
            w.writerow([label, name, repr(float(t)), repr(float(v))])
    for label, name, err in rows:
        print(f"{label:>20s} {name:>14s} {err:.6e}")
    print(f"report -> {out}; histories -> {hist}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qmor", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--out", help="output artifact path")

    sp = sub.add_parser("hdm-run", help="run the HDM and write snapshots")
    common(sp)
    for kind in ("affine", "quadratic"):
        sp = sub.add_parser(f"build-{kind}", help=f"build the {kind} manifold")
        common(sp)
        sp.add_argument("snapshots", nargs="?")
        sp.add_argument("--alpha-star", type=float, dest="alpha_star")
    sp = sub.add_parser("ecsw-train", help="train an ECSW reduced mesh")
    common(sp)
    sp.add_argument("manifold", nargs="?")
    sp.add_argument("--snapshots")
    sp.add_argument("--tau", type=float)
    sp = sub.add_parser("rom-run", help="run a (hyperreduced) LSPG ROM")
    common(sp)
    sp.add_argument("manifold", nargs="?")
    sp.add_argument("--mesh")
    sp.add_argument("--dump-coords", action="store_true")
    sp = sub.add_parser("compare", help="relative QoI errors against the HDM")
    common(sp)
    sp.add_argument("hdm")
    sp.add_argument("roms", nargs="+")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = PipelineConfig.load(args.config)
        if args.command == "hdm-run":
            return cmd_hdm_run(cfg, args.out)
        if args.command in ("build-affine", "build-quadratic"):
            return cmd_build(cfg, args.command.split("-")[1], args.snapshots, args.out,
                             args.alpha_star)
        if args.command == "ecsw-train":
            return cmd_ecsw_train(cfg, args.manifold, args.snapshots, args.tau, args.out)
        if args.command == "rom-run":
            return cmd_rom_run(cfg, args.manifold, args.mesh, args.out, args.dump_coords)
        return cmd_compare(args.hdm, args.roms, args.out or "report.csv")
    except (UserError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
