# ---
# jupyter:
#   jupytext:
#     formats: ipynb,py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # Class statistics and the class-wise masking schedule
#
# Every class gets a masking curve `gamma[t, c]`: the probability that a
# pixel of class `c` has been replaced by MASK after `t` steps. Its shape is
# set by one number per class, the product `psi * phi` of an area term and a
# rarity term estimated from a corpus of label maps.

# %%
import numpy as np

from scdm.imagediff.toy import random_block_map
from scdm.labelmap import estimate_stats
from scdm.schedule import build_label_schedule, step_betas, verify_prop1

rng = np.random.default_rng(0)

# %% [markdown]
# ## A toy corpus
#
# Class 0 is a background that fills most maps; classes 1 and 2 appear as
# rectangles. Class 3 is painted rarely and small.

# %%
corpus = []
for _ in range(200):
    m = random_block_map((16, 16), 4, rng, classes=np.array([0, 1, 2]))
    cells = m.cells.copy()
    if rng.random() < 0.1:
        i, j = rng.integers(0, 14, size=2)
        cells[i:i + 2, j:j + 2] = 3
    corpus.append(m.with_cells(cells))

stats = estimate_stats(corpus, clamp_phi=True)
for c in range(4):
    print(f"class {c}: psi={stats.psi[c]:7.2f} phi={stats.phi[c]:5.2f} product={stats.products()[c]:8.2f}")

# %% [markdown]
# ## Curves for a few values of eta
#
# Large products keep a class visible for longer. `eta` interpolates between
# the uniform schedule (`eta -> 0`) and no label diffusion at all
# (`eta = inf`).

# %%
T = 50
for eta in (1e-6, 0.5, 1.0, 2.0, "inf"):
    sched = build_label_schedule(stats, T, eta)
    mid = sched.gamma[T // 2]
    print(f"eta={eta!s:>6}: gamma at t={T // 2 + 1}: " + " ".join(f"{g:.3f}" for g in mid))

# %% [markdown]
# The one-step masking probabilities follow from the table. They compose
# back into `gamma` exactly.

# %%
sched = build_label_schedule(stats, T, 1.0)
beta = step_betas(sched)
print("max reconstruction error:", np.abs(1 - np.cumprod(1 - beta, axis=0) - sched.gamma).max())

# %% [markdown]
# ## The two limits, checked numerically
#
# For the two reference products used throughout the tests the curve
# approaches `r = (t-1)/T` as `eta -> 0` and zero as `eta` grows.

# %%
for product in (17.3, 651.3):
    print(verify_prop1(product, T).to_json())
