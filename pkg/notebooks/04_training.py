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
# # Training a small per-pixel denoiser
#
# The network sees the noisy pixel, an embedding of its (possibly masked)
# label and the time step. Training draws the label corruption from the
# class-wise schedule and drops the whole map to MASK 20% of the time, which
# is what lets the same network act as the unconditional model for guidance.

# %%
import numpy as np

from scdm.imagediff import MLPDenoiser, OracleDenoiser, SamplerConfig, ToyDataSpec, random_block_map, sample, train_step
from scdm.labelmap import estimate_stats
from scdm.schedule import build_image_schedule, build_label_schedule

rng = np.random.default_rng(0)
spec = ToyDataSpec(np.array([[0.0], [-0.6], [0.7]]), 0.1, np.ones(3) / 3)
T = 20
pool = [random_block_map((8, 8), 3, rng) for _ in range(64)]
lab = build_label_schedule(estimate_stats(pool, clamp_phi=True), T, 1.0)
img = build_image_schedule(T)
net = MLPDenoiser.init(3, 1, T, rng, hidden=32)

# %%
history = []
for it in range(1500):
    pick = rng.integers(len(pool), size=8)
    y0 = np.stack([pool[i].cells.astype(np.int64) for i in pick])
    x0 = np.stack([spec.sample_x0(pool[i], rng) for i in pick])
    rep = train_step(net, x0, y0, lab, img, rng, lambda_vlb=0.001, drop_rate=0.2, lr=0.05)
    history.append((rep.l_simple, rep.l_vlb))
h = np.array(history)
for lo in range(0, 1500, 300):
    print(f"iters {lo:4d}-{lo + 299}: L_simple={h[lo:lo + 300, 0].mean():.4f} L_vlb={h[lo:lo + 300, 1].mean():.4f}")

# %% [markdown]
# The trained network is compared with the exact denoiser on the same map and
# seed. The learned variance head is used for the network.

# %%
y = pool[0]
cfg = SamplerConfig(seed=4, cfg_scale=0.0, extrapolation=0.0)
x_net = sample(net, y, lab, img, SamplerConfig(seed=4, cfg_scale=0.0, extrapolation=0.0, variance_mode="learned"), 1)
x_orc = sample(OracleDenoiser(spec, img), y, lab, img, cfg, 1)
print("mse net vs class means:   ", float(((x_net - spec.mean_image(y)) ** 2).mean()))
print("mse oracle vs class means:", float(((x_orc - spec.mean_image(y)) ** 2).mean()))
