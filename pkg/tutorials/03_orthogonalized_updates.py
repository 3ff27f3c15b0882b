"""See what Newton-Schulz orthogonalization does to a gradient-like matrix.

Run with ``python tutorials/03_orthogonalized_updates.py``.
"""

import numpy as np

from clinseq import newton_schulz_orth
from clinseq.optim import spectral_norm_estimate

rng = np.random.default_rng(0)

# A low-rank-ish matrix: a few strong directions on top of noise, the shape
# a momentum buffer often has.
g = rng.normal(size=(32, 3)) @ rng.normal(size=(3, 24)) * 5 + rng.normal(size=(32, 24)) * 0.5
print("largest singular value (power iteration):", round(spectral_norm_estimate(g), 3))
print("singular values before:", np.round(np.linalg.svd(g, compute_uv=False)[:6], 3))

for steps in (1, 3, 5):
    s = np.linalg.svd(newton_schulz_orth(g, steps), compute_uv=False)
    print(f"after {steps} iterations: strong {np.round(s[:3], 3)}  weakest {s.min():.3f}")

# Directions far below the top one (here a ratio of about 1/300) grow only
# slowly. With a condition number of at most 10 five iterations are enough
# to land every singular value close to one.
q, _ = np.linalg.qr(rng.normal(size=(32, 24)))
w = q * np.linspace(1.0, 10.0, 24)
s = np.linalg.svd(newton_schulz_orth(w, 5), compute_uv=False)
print(f"condition number 10, 5 iterations: min {s.min():.3f}  max {s.max():.3f}")

# The singular vectors are kept, only the spectrum is flattened, so every
# direction of the update moves the weights by a similar amount.
u, _, vt = np.linalg.svd(g, full_matrices=False)
core = u.T @ newton_schulz_orth(g, 5) @ vt.T
print("off-diagonal leakage:", float(np.abs(core - np.diag(np.diag(core))).max()))
