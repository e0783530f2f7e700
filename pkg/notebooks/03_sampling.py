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
# # Sampling with an exact denoiser
#
# In the toy image model each pixel of class `c` is drawn from
# `N(m_c, sigma0^2)`. The optimal noise predictor is then available in closed
# form, which makes sampler behaviour easy to check against known answers.

# %%
import numpy as np

from scdm.imagediff import OracleDenoiser, SamplerConfig, ToyDataSpec, sample, sample_batch
from scdm.labelmap import SemanticMap
from scdm.schedule import build_image_schedule, build_label_schedule

spec = ToyDataSpec(np.array([[-0.6, 0.2], [0.7, -0.1]]), 0.1, np.array([0.5, 0.5]))
T = 50
img = build_image_schedule(T)
lab = build_label_schedule(np.array([2.0, 8.0]), T, 1.0)
oracle = OracleDenoiser(spec, img)
y0 = SemanticMap(np.array([[0, 0, 1], [0, 1, 1], [1, 1, 1]]), 2)

# %% [markdown]
# ## Conditional means
#
# Without guidance or extrapolation the sampler targets `p(x0 | y0)`, so the
# per-pixel average over many samples should sit on the class means.

# %%
cfg = SamplerConfig(steps=50, cfg_scale=0.0, extrapolation=0.0, seed=1)
xs = sample_batch(oracle, [y0] * 300, lab, img, cfg, 2, range(300))
print("max |mean - m(y0)|:", np.abs(xs.mean(0) - spec.mean_image(y0)).max())

# %% [markdown]
# ## Guidance, thresholding and extrapolation
#
# The default configuration uses guidance scale 0.5, extrapolation 0.8 and
# percentile thresholding at 0.95. Each knob moves the output away from the
# plain conditional sample.

# %%
base = sample(oracle, y0, lab, img, cfg, 2)
for kw in ({"cfg_scale": 0.5}, {"extrapolation": 0.8}, {"cfg_scale": 0.5, "extrapolation": 0.8}):
    alt = sample(oracle, y0, lab, img, SamplerConfig(steps=50, seed=1, **{"cfg_scale": 0.0, "extrapolation": 0.0, **kw}), 2)
    print(kw, "rms change:", float(np.sqrt(((alt - base) ** 2).mean())))

# %% [markdown]
# ## Respaced sampling
#
# Fewer steps visit an evenly spaced subset of `1..T`.

# %%
for steps in (5, 10, 25, 50):
    x = sample(oracle, y0, lab, img, SamplerConfig(steps=steps, seed=1), 2)
    print(steps, "steps, mse to class means:", float(((x - spec.mean_image(y0)) ** 2).mean()))
