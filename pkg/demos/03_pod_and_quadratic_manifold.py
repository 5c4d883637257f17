"""POD, the dimension heuristic, and a quadratic manifold fit.

Compares how well an affine subspace and a quadratic manifold of the same
small dimension reproduce the training snapshots.
"""
import numpy as np

from qmor.hdm import ConservationLaw1D, TimeDiscretization, hdm_simulate
from qmor.manifold import affine_manifold, build_quadratic, dimension_heuristic
from qmor.snapshots import pod_basis

snaps = hdm_simulate(ConservationLaw1D(), TimeDiscretization("bdf2", 0.05), 25.0).snapshots
full = pod_basis(snaps, 1e-4)
n_p, n_q, n = dimension_heuristic(full.dimension, 0.15, snaps.count)
print(f"POD at 1e-4 keeps {full.dimension} modes; heuristic: {n_p} -> {n_q} -> {n}")


def fit_error(man):
    q = man.V.T @ snaps.centered()
    return np.linalg.norm(man.evaluate_many(q) - snaps.states) / np.linalg.norm(snaps.states)


basis = full.truncate(n)
print(f"affine    n={n}: {fit_error(affine_manifold(basis, snaps.u_ref)):.3e}")
quad = build_quadratic(snaps, basis)
rec = quad.build_record
print(f"quadratic n={n}: {fit_error(quad):.3e} "
      f"(GCV alpha*/sigma_1 = {rec['alpha_star'] / rec['sigma_max']:.1e})")
print(f"affine    n={full.dimension}: {fit_error(affine_manifold(full, snaps.u_ref)):.3e}")
