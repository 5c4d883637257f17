"""Affine and quadratic manifold LSPG model reduction with ECSW hyperreduction."""
from .ecsw import (ReducedMesh, TrainingSystem, build_training_system, full_mesh,
                   train_reduced_mesh, training_coordinates)
from .hdm import ConservationLaw1D, TimeDiscretization, hdm_simulate
from .manifold import (Manifold, affine_manifold, build_quadratic, dimension_heuristic,
                       unique_kron, unique_kron_tangent)
from .numerics import nnls_early_stop, thin_svd, tikhonov_row_solve
from .rom import LspgConfig, hyper_lspg_step, lspg_step, relative_error, run_rom
from .snapshots import ReducedBasis, SnapshotSet, pod_basis

__version__ = "0.1.0"
