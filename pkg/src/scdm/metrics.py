"""Evaluation metrics: grouped mIoU, PSNR, SSIM and a Gaussian Fréchet distance."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from scdm.errors import NumericError
from scdm.labelmap import SemanticMap, class_ious, miou

__all__ = [
    "GroupAssignment",
    "grouped_miou",
    "miou",
    "psnr",
    "ssim",
    "frechet_gaussian",
    "PSNR_CAP_DB",
]

GROUPS = ("frequent", "common", "rare")
PSNR_CAP_DB = 99.0


@dataclass(frozen=True)
class GroupAssignment:
    """Class -> group, ranked by ``psi*phi`` (smallest products are frequent)."""

    groups: dict[int, str]

    @classmethod
    def from_products(cls, products: Sequence[float], cuts: tuple[float, float] = (1 / 3, 2 / 3)) -> "GroupAssignment":
        """Split classes into rank quantiles; default cut points are terciles."""
        p = np.asarray(products, dtype=float)
        order = np.argsort(p, kind="stable")
        n = len(p)
        lo, hi = int(round(cuts[0] * n)), int(round(cuts[1] * n))
        out = {}
        for rank, c in enumerate(order):
            out[int(c)] = GROUPS[0] if rank < lo else GROUPS[1] if rank < hi else GROUPS[2]
        return cls(out)

    def classes(self, group: str) -> list[int]:
        return sorted(c for c, g in self.groups.items() if g == group)


def grouped_miou(
    pred: SemanticMap, truth: SemanticMap, groups: GroupAssignment, ignore: int | None = None
) -> dict[str, float | None]:
    """mIoU overall and per group; a group with no class present maps to ``None``."""
    ious = class_ious(pred, truth, ignore)
    out: dict[str, float | None] = {"all": float(np.mean(list(ious.values()))) if ious else None}
    for g in GROUPS:
        vals = [ious[c] for c in groups.classes(g) if c in ious]
        out[g] = float(np.mean(vals)) if vals else None
    return out


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 2.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs.

    The default ``data_range`` matches images in ``[-1, 1]``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def capped_psnr(value: float) -> float:
    return min(value, PSNR_CAP_DB)


def _window_weights(window: int, gaussian: bool, sigma: float) -> np.ndarray:
    if not gaussian:
        w = np.ones((window, window))
    else:
        r = np.arange(window) - (window - 1) / 2
        g = np.exp(-(r**2) / (2 * sigma**2))
        w = np.outer(g, g)
    return w / w.sum()


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window: int = 7,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float = 2.0,
    gaussian: bool = False,
    sigma: float = 1.5,
) -> float:
    """Mean SSIM over all fully contained ``window x window`` positions.

    Local statistics are weighted means (population variance). Multi-channel
    inputs ``(H, W, CH)`` are averaged over channels.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _same_shape(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    H, W = a.shape[:2]
    if window > min(H, W) or window < 1:
        raise ValueError(f"window {window} does not fit a {H}x{W} image")
    w = _window_weights(window, gaussian, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        pa = sliding_window_view(a[..., ch], (window, window))
        pb = sliding_window_view(b[..., ch], (window, window))
        mu_a = np.einsum("ijkl,kl->ij", pa, w)
        mu_b = np.einsum("ijkl,kl->ij", pb, w)
        var_a = np.einsum("ijkl,kl->ij", pa * pa, w) - mu_a**2
        var_b = np.einsum("ijkl,kl->ij", pb * pb, w) - mu_b**2
        cov = np.einsum("ijkl,kl->ij", pa * pb, w) - mu_a * mu_b
        s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


def _fit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if n < 2:
        raise ValueError("need at least two feature vectors per set")
    mu = x.mean(0)
    cov = np.atleast_2d(np.cov(x, rowvar=False))
    if n <= d:
        cov = cov + (1e-6 * np.trace(cov) / d) * np.eye(d)
    return mu, cov


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    if w.min() < -1e-8 * max(1.0, abs(w).max()):
        raise NumericError(f"covariance is not positive semi-definite (min eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})``."""
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    root_a = _psd_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    if w.min() < -1e-8 * max(1.0, abs(w).max()):
        raise NumericError("cross term is not positive semi-definite")
    tr_cross = np.sqrt(np.clip(w, 0, None)).sum()
    d = mu_a - mu_b
    val = float(d @ d + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_cross)
    return max(val, 0.0)


def frechet_gaussian(set_a: np.ndarray, set_b: np.ndarray) -> float:
    """2-Wasserstein distance between Gaussian fits of two feature sets.

    Rows are samples. Covariances use ``ddof=1``; when a set has no more
    samples than dimensions, ``1e-6 * tr(S) / d`` is added to the diagonal.
    """
    mu_a, cov_a = _fit(set_a)
    mu_b, cov_b = _fit(set_b)
    if mu_a.shape != mu_b.shape:
        raise ValueError(f"feature dimension mismatch {mu_a.shape} vs {mu_b.shape}")
    return frechet_from_moments(mu_a, cov_a, mu_b, cov_b)
