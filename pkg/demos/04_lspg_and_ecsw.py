"""LSPG reduced models with and without ECSW hyperreduction.

Builds a POD model, trains reduced meshes at several tolerances and reports
the mesh size and the state error against the unreduced ROM.
"""
import time

import numpy as np

from qmor.ecsw import build_training_system, train_reduced_mesh, training_coordinates
from qmor.hdm import ConservationLaw1D, TimeDiscretization, hdm_simulate
from qmor.manifold import affine_manifold
from qmor.rom import run_rom
from qmor.snapshots import pod_basis

model = ConservationLaw1D()
td = TimeDiscretization("bdf2", 0.05)
snaps = hdm_simulate(model, td, 25.0).snapshots
man = affine_manifold(pod_basis(snaps, 1e-3), snaps.u_ref)
print("PROM dimension", man.dimension)

t0 = time.perf_counter()
ref = man.evaluate_many(run_rom(man, model, td, 25.0).coordinates)
t_rom = time.perf_counter() - t0
err = np.linalg.norm(ref - snaps.states) / np.linalg.norm(snaps.states)
print(f"PROM: {t_rom:.1f} s, state error vs HDM {err:.2e}")

system = build_training_system(man, model, training_coordinates(man, snaps))
for tau in (1e-1, 1e-2, 1e-3):
    mesh = train_reduced_mesh(system, tau, model, man)
    t0 = time.perf_counter()
    traj = run_rom(man, model, td, 25.0, mesh=mesh)
    dt = time.perf_counter() - t0
    e = np.linalg.norm(man.evaluate_many(traj.coordinates) - ref) / np.linalg.norm(ref)
    print(f"tau {tau:.0e}: {mesh.size:3d}/512 cells, {dt:.1f} s, error vs PROM {e:.2e}")
