"""Dense building blocks: truncated SVD, Tikhonov filtering, GCV and NNLS.

Run with ``python3 demos/01_numerics.py``.
"""
import numpy as np

from qmor.numerics import gcv_score, nnls_early_stop, thin_svd, tikhonov_row_solve

rng = np.random.default_rng(0)

# An ill-conditioned feature matrix with geometrically decaying spectrum.
u, _ = np.linalg.qr(rng.standard_normal((30, 12)))
w, _ = np.linalg.qr(rng.standard_normal((200, 12)))
q = (u * np.geomspace(1, 1e-8, 12)) @ w.T
svd = thin_svd(q)
print("rank kept:", svd.rank, " sigma range: %.1e .. %.1e" % (svd.singular_values[0],
                                                             svd.singular_values[-1]))

# A noisy row right-hand side h q = e + noise.  Larger alpha damps the tail.
h_true = rng.standard_normal(30)
e = h_true @ q + 1e-6 * rng.standard_normal(200)
for alpha in np.geomspace(svd.singular_values[0], svd.singular_values[-1], 5):
    h = tikhonov_row_solve(svd, e, alpha)
    print(f"alpha {alpha:8.1e}  |h| {np.linalg.norm(h):9.3e}  gcv {gcv_score(svd, e, alpha):9.3e}")

# Sparse nonnegative fit, stopped once the residual ratio reaches tau.
c = np.abs(rng.standard_normal((60, 40)))
d = c @ np.ones(40)
for tau in (1e-1, 1e-2, 1e-3):
    sol = nnls_early_stop(c, d, tau)
    ratio = sol.residual_norm / np.linalg.norm(d)
    print(f"tau {tau:.0e}: support {sol.support.size:2d} of 40, ratio {ratio:.2e}")
