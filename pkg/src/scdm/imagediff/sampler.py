"""Reverse sampling conditioned on diffused labels.

Each reverse step evaluates the denoiser on the diffused map ``y_t`` and on
the all-MASK null map, combines them with classifier-free guidance, predicts
``x0``, applies dynamic thresholding, extrapolates from the previous step's
prediction and samples ``x_{t_prev}`` from the Gaussian posterior.

Random streams (see :mod:`scdm.rng`), per sample index ``k``:

- ``("x_T", k)``: initial noise
- ``("label_u", k)``: per-cell uniforms of the coupled label trajectory
- ``("label_u", k, t)``: fresh per-step label uniforms
- ``("x_noise", k, t)``: posterior noise at step ``t``
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Literal, Sequence

import numpy as np

from scdm import rng as rngmod
from scdm.errors import ContractError
from scdm.imagediff.denoisers import Denoiser
from scdm.labeldiff import mask_times_from_uniforms, mask_with_uniforms, reconstruct
from scdm.labelmap import SemanticMap
from scdm.schedule import ImageSchedule, LabelSchedule

VarianceMode = Literal["fixed_small", "fixed_large", "learned"]


@dataclass(frozen=True)
class SamplerConfig:
    steps: int | None = None
    cfg_scale: float = 0.5
    extrapolation: float = 0.8
    threshold_percentile: float = 0.95
    variance_mode: VarianceMode = "fixed_small"
    seed: int = 0
    coupling: Literal["coupled", "fresh"] = "coupled"
    force_full_mask_at_T: bool = True

    def __post_init__(self) -> None:
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.cfg_scale < 0 or self.extrapolation < 0:
            raise ValueError("cfg_scale and extrapolation must be >= 0")
        if not 0 < self.threshold_percentile <= 1:
            raise ValueError("threshold_percentile must lie in (0, 1]")
        if self.variance_mode not in ("fixed_small", "fixed_large", "learned"):
            raise ValueError(f"unknown variance_mode {self.variance_mode!r}")
        if self.coupling not in ("coupled", "fresh"):
            raise ValueError(f"unknown coupling {self.coupling!r}")

    def to_json(self) -> dict:
        return asdict(self)


def respace(T: int, steps: int | None) -> list[int]:
    """Evenly spaced, strictly increasing steps containing 1 and ``T``.

    >>> respace(10, 4)
    [1, 4, 7, 10]
    """
    if steps is None or steps >= T:
        return list(range(1, T + 1))
    if steps == 1:
        return [T]
    return sorted({int(v) for v in np.round(np.linspace(1, T, steps))})


def dynamic_threshold(x0: np.ndarray, percentile: float) -> np.ndarray:
    """Per-sample percentile clipping of ``x0`` with shape ``(B, ...)``.

    ``q`` is the ``percentile`` quantile of ``|x0|`` over all components of a
    sample. Samples with ``q > 1`` are clipped to ``[-q, q]`` and divided by
    ``q``; the rest pass through unchanged.
    """
    B = x0.shape[0]
    q = np.quantile(np.abs(x0).reshape(B, -1), percentile, axis=1)
    q = q.reshape((B,) + (1,) * (x0.ndim - 1))
    return np.where(q > 1, np.clip(x0, -q, q) / np.maximum(q, 1.0), x0)


def reverse_step(
    denoiser: Denoiser,
    x_t: np.ndarray,
    y_t: np.ndarray,
    t: int,
    t_prev: int,
    cfg: SamplerConfig,
    image_sched: ImageSchedule,
    x0_tilde_prev: np.ndarray | None = None,
    noise: np.ndarray | None = None,
    first: bool | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """One reverse update ``x_t -> x_{t_prev}`` for a batch ``(B, H, W, CH)``.

    ``y_t`` holds label cells ``(B, H, W)``. ``first`` marks the initial step
    (default: ``t == T``), where extrapolation is skipped. ``noise`` is the
    standard normal draw for the posterior; it is ignored when ``t_prev == 0``.

    Returns ``(x_{t_prev}, x0_tilde)``.
    """
    if first is None:
        first = t == image_sched.T
    w = cfg.extrapolation
    if not first and w > 0 and x0_tilde_prev is None:
        raise ContractError(f"extrapolation w={w} needs the previous x0 prediction at t={t}")
    if not 0 <= t_prev < t:
        raise ValueError(f"need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")

    null = np.full_like(y_t, denoiser.num_classes)
    eps_c, var_c = denoiser(x_t, y_t, t)
    if cfg.cfg_scale != 0:
        eps_u, _ = denoiser(x_t, null, t)
        eps = eps_c + cfg.cfg_scale * (eps_c - eps_u)
    else:
        eps = eps_c

    a_t = image_sched.ab(t)
    a_p = image_sched.ab(t_prev)
    x0 = (x_t - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)
    x0 = dynamic_threshold(x0, cfg.threshold_percentile)
    if first or w == 0:
        x0_tilde = x0
    else:
        x0_tilde = x0 + w * (x0 - x0_tilde_prev)

    ratio = a_t / a_p
    mean = (math.sqrt(a_p) * (1.0 - ratio) * x0_tilde + math.sqrt(ratio) * (1.0 - a_p) * x_t) / (1.0 - a_t)
    if t_prev == 0:
        return mean, x0_tilde

    small = image_sched.posterior_variance(t, t_prev)
    large = image_sched.step_variance(t, t_prev)
    if cfg.variance_mode == "fixed_small":
        std = math.sqrt(small)
    elif cfg.variance_mode == "fixed_large":
        std = math.sqrt(large)
    else:
        if var_c is None:
            raise ContractError("variance_mode='learned' needs a denoiser with a variance output")
        frac = (var_c + 1.0) / 2.0
        std = np.exp(0.5 * (frac * math.log(large) + (1.0 - frac) * math.log(max(small, 1e-20))))
    if noise is None:
        raise ContractError("noise is required when t_prev > 0")
    return mean + std * noise, x0_tilde


def _as_cells(maps: Sequence[SemanticMap]) -> np.ndarray:
    return np.stack([m.cells.astype(np.int64) for m in maps])


def sample_batch(
    denoiser: Denoiser,
    y0s: Sequence[SemanticMap],
    label_sched: LabelSchedule,
    image_sched: ImageSchedule,
    cfg: SamplerConfig,
    channels: int,
    sample_indices: Sequence[int] | None = None,
) -> np.ndarray:
    """Sample one image per label map; returns ``(B, H, W, CH)``.

    Output ``b`` depends only on ``(cfg.seed, sample_indices[b], y0s[b])``
    and the schedules, so pairing a clean and a corrupted map under the same
    index shares all noise.
    """
    if not y0s:
        raise ValueError("need at least one label map")
    if label_sched.T != image_sched.T:
        raise ValueError("label and image schedules must share T")
    if sample_indices is None:
        sample_indices = range(len(y0s))
    idx = [int(k) for k in sample_indices]
    if len(idx) != len(y0s):
        raise ValueError("one sample index per map is required")
    shape = y0s[0].shape
    if any(m.shape != shape for m in y0s):
        raise ValueError("all maps in a batch must share a shape")
    if any(m.has_mask() for m in y0s):
        raise ValueError("y0 maps must not contain MASK")

    T = image_sched.T
    steps = respace(T, cfg.steps)
    seed = cfg.seed
    x = np.stack([rngmod.stream(seed, "x_T", k).standard_normal(shape + (channels,)) for k in idx])

    U = None
    if cfg.coupling == "coupled":
        U = [
            mask_times_from_uniforms(m, label_sched, rngmod.pixel_uniforms(seed, "label_u", shape, k))
            for m, k in zip(y0s, idx)
        ]

    x0_tilde = None
    for pos in range(len(steps) - 1, -1, -1):
        t = steps[pos]
        t_prev = steps[pos - 1] if pos > 0 else 0
        if cfg.force_full_mask_at_T and t == T and label_sched.has_diffusion:
            y_t = np.full((len(y0s),) + shape, label_sched.mask_value, dtype=np.int64)
        elif U is not None:
            y_t = _as_cells([reconstruct(u, m, t) for u, m in zip(U, y0s)])
        else:
            y_t = _as_cells(
                [
                    mask_with_uniforms(m, label_sched, t, rngmod.pixel_uniforms(seed, "label_u", shape, k, t))
                    for m, k in zip(y0s, idx)
                ]
            )
        noise = None
        if t_prev > 0:
            noise = np.stack([rngmod.stream(seed, "x_noise", k, t).standard_normal(shape + (channels,)) for k in idx])
        x, x0_tilde = reverse_step(
            denoiser, x, y_t, t, t_prev, cfg, image_sched, x0_tilde, noise, first=(t == steps[-1])
        )
    return x


def sample(
    denoiser: Denoiser,
    y0: SemanticMap,
    label_sched: LabelSchedule,
    image_sched: ImageSchedule,
    cfg: SamplerConfig,
    channels: int,
    sample_index: int = 0,
) -> np.ndarray:
    """Sample a single ``(H, W, CH)`` image for ``y0``."""
    return sample_batch(denoiser, [y0], label_sched, image_sched, cfg, channels, [sample_index])[0]


def sample_fixed_label(
    denoiser: Denoiser,
    y0s: Sequence[SemanticMap],
    image_sched: ImageSchedule,
    cfg: SamplerConfig,
    channels: int,
    sample_indices: Sequence[int] | None = None,
) -> np.ndarray:
    """Conventional conditional sampler: every step sees the clean ``y0``."""
    if sample_indices is None:
        sample_indices = range(len(y0s))
    idx = [int(k) for k in sample_indices]
    shape = y0s[0].shape
    steps = respace(image_sched.T, cfg.steps)
    y = _as_cells(y0s)
    x = np.stack([rngmod.stream(cfg.seed, "x_T", k).standard_normal(shape + (channels,)) for k in idx])
    x0_tilde = None
    for pos in range(len(steps) - 1, -1, -1):
        t = steps[pos]
        t_prev = steps[pos - 1] if pos > 0 else 0
        noise = None
        if t_prev > 0:
            noise = np.stack(
                [rngmod.stream(cfg.seed, "x_noise", k, t).standard_normal(shape + (channels,)) for k in idx]
            )
        x, x0_tilde = reverse_step(denoiser, x, y, t, t_prev, cfg, image_sched, x0_tilde, noise, first=(t == steps[-1]))
    return x
