"""Noisy-label benchmark generators: DS, Edge and Random corruptions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy import ndimage

from scdm.labelmap import SemanticMap

Metric = Literal["chebyshev", "manhattan", "euclidean"]


@dataclass(frozen=True)
class CorruptionConfig:
    mode: Literal["ds", "edge", "random"]
    unlabeled_class: int = 0
    ds_factor: int = 4
    edge_distance: int = 2
    edge_metric: Metric = "chebyshev"
    ignore_unlabeled_edges: bool = False
    random_rate: float = 0.10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("ds", "edge", "random"):
            raise ValueError(f"unknown corruption mode {self.mode!r}")
        if self.ds_factor < 1:
            raise ValueError("ds_factor must be >= 1")
        if self.edge_distance < 0:
            raise ValueError("edge_distance must be >= 0")
        if not 0.0 <= self.random_rate <= 1.0:
            raise ValueError("random_rate must lie in [0, 1]")


def _require_clean(y: SemanticMap) -> None:
    if y.has_mask():
        raise ValueError("corruptions expect a MASK-free map")


def _check_unlabeled(y: SemanticMap, unlabeled: int) -> None:
    if not 0 <= unlabeled < y.num_classes:
        raise ValueError(f"unlabeled class {unlabeled} outside [0, {y.num_classes})")


def corrupt_ds(y0: SemanticMap, factor: int) -> SemanticMap:
    """Nearest-neighbour down- then up-sampling by ``factor``.

    Each ``factor x factor`` block takes the value of its top-left cell.
    Dimensions that are not multiples of ``factor`` are edge-padded first and
    cropped afterwards.
    """
    _require_clean(y0)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return y0
    H, W = y0.shape
    ph, pw = -H % factor, -W % factor
    cells = np.pad(y0.cells, ((0, ph), (0, pw)), mode="edge")
    small = cells[::factor, ::factor]
    up = np.repeat(np.repeat(small, factor, axis=0), factor, axis=1)
    return y0.with_cells(up[:H, :W])


def edge_cells(cells: np.ndarray, ignore_class: int | None = None) -> np.ndarray:
    """Cells with a 4-neighbour of a different class.

    With ``ignore_class`` set, differences involving that class do not count.
    """
    edge = np.zeros(cells.shape, dtype=bool)
    for axis in (0, 1):
        a = cells.take(np.arange(cells.shape[axis] - 1), axis=axis)
        b = cells.take(np.arange(1, cells.shape[axis]), axis=axis)
        diff = a != b
        if ignore_class is not None:
            diff &= (a != ignore_class) & (b != ignore_class)
        lo = [slice(None)] * 2
        hi = [slice(None)] * 2
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        edge[tuple(lo)] |= diff
        edge[tuple(hi)] |= diff
    return edge


def _ball(distance: int, metric: Metric) -> np.ndarray:
    r = np.arange(-distance, distance + 1)
    di, dj = np.meshgrid(r, r, indexing="ij")
    if metric == "chebyshev":
        return np.ones_like(di, dtype=bool)
    if metric == "manhattan":
        return np.abs(di) + np.abs(dj) <= distance
    if metric == "euclidean":
        return di**2 + dj**2 <= distance**2
    raise ValueError(f"unknown distance metric {metric!r}")


def corrupt_edge(
    y0: SemanticMap,
    distance: int = 2,
    unlabeled: int = 0,
    metric: Metric = "chebyshev",
    ignore_unlabeled_edges: bool = False,
) -> SemanticMap:
    """Mark every cell within ``distance`` of a class boundary as ``unlabeled``."""
    _require_clean(y0)
    _check_unlabeled(y0, unlabeled)
    if distance < 0:
        raise ValueError("distance must be >= 0")
    edge = edge_cells(y0.cells, unlabeled if ignore_unlabeled_edges else None)
    if distance > 0 and edge.any():
        edge = ndimage.binary_dilation(edge, structure=_ball(distance, metric))
    return y0.with_cells(np.where(edge, unlabeled, y0.cells))


def corrupt_random(y0: SemanticMap, rate: float, unlabeled: int, rng: np.random.Generator) -> SemanticMap:
    """Flip each cell to ``unlabeled`` independently with probability ``rate``."""
    _require_clean(y0)
    _check_unlabeled(y0, unlabeled)
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must lie in [0, 1], got {rate}")
    flip = rng.random(y0.shape) < rate
    return y0.with_cells(np.where(flip, unlabeled, y0.cells))


def corrupt(y0: SemanticMap, config: CorruptionConfig, rng: np.random.Generator | None = None) -> SemanticMap:
    if config.mode == "ds":
        return corrupt_ds(y0, config.ds_factor)
    if config.mode == "edge":
        return corrupt_edge(
            y0, config.edge_distance, config.unlabeled_class, config.edge_metric, config.ignore_unlabeled_edges
        )
    if rng is None:
        rng = np.random.default_rng(config.seed)
    return corrupt_random(y0, config.random_rate, config.unlabeled_class, rng)
