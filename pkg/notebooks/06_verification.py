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
# # Numerical checks
#
# `scdm verify` bundles the independent checks used by the test suite. Each
# returns its measured error next to the tolerance it is held to.

# %%
import json

from scdm.verify import TARGETS, run_checks

rep = run_checks(TARGETS)
for name, check in rep["checks"].items():
    shown = {k: v for k, v in check.items() if k not in ("reports",)}
    print(name, json.dumps(shown, default=float))

# %% [markdown]
# The implicit-classifier identity: averaging the gradient of the masked
# classifier over the forward noise scales the clean gradient by `1 - gamma`.

# %%
import numpy as np

from scdm.labeldiff import ImplicitClassifier, verify_prop2

rng = np.random.default_rng(0)
clf = ImplicitClassifier(rng.standard_normal((3, 2)))
x = rng.standard_normal(2)
for g in (0.0, 0.5, 0.9, 1.0):
    r = verify_prop2(clf, x, 1, g)
    print(g, r.lhs, r.rhs)
