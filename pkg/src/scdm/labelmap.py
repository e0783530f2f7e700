"""Semantic label maps, the SLM1 file format and corpus class statistics.

Classes are 0-based ``0..C-1``; the absorbing ``MASK`` state is the value
``C`` itself, so a valid cell ``v`` always satisfies ``0 <= v <= C``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from scdm._io import atomic_write_bytes, provenance
from scdm.errors import CellValueError, MapFormatError, TruncatedFileError

SLM_MAGIC = b"SLM1\n"


@dataclass(frozen=True)
class SemanticMap:
    """An ``H x W`` grid of class ids with ``MASK == num_classes``.

    The cell array is copied to ``uint16`` and made read-only.
    """

    cells: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        raw = np.asarray(self.cells)
        if raw.ndim != 2 or raw.size == 0:
            raise ValueError(f"cells must be a non-empty 2-D grid, got shape {raw.shape}")
        if raw.size and (raw.min() < 0 or raw.max() > self.num_classes):
            raise CellValueError(
                f"cell values must lie in [0, {self.num_classes}], "
                f"got range [{raw.min()}, {raw.max()}]"
            )
        arr = np.array(raw, dtype=np.uint16)
        arr.setflags(write=False)
        object.__setattr__(self, "cells", arr)

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    @property
    def mask_value(self) -> int:
        return self.num_classes

    def has_mask(self) -> bool:
        return bool((self.cells == self.num_classes).any())

    def with_cells(self, cells: np.ndarray) -> "SemanticMap":
        return SemanticMap(cells, self.num_classes)

    @classmethod
    def full(cls, shape: tuple[int, int], value: int, num_classes: int) -> "SemanticMap":
        return cls(np.full(shape, value, dtype=np.uint16), num_classes)

    @classmethod
    def all_mask(cls, shape: tuple[int, int], num_classes: int) -> "SemanticMap":
        """The null condition: every cell in the absorbing state."""
        return cls.full(shape, num_classes, num_classes)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SemanticMap):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(self.cells, other.cells)

    def __hash__(self) -> int:
        return hash((self.num_classes, self.cells.shape, self.cells.tobytes()))


# --------------------------------------------------------------------------
# SLM1 I/O
# --------------------------------------------------------------------------


def encode_map(m: SemanticMap) -> bytes:
    header = SLM_MAGIC + f"{m.height} {m.width} {m.num_classes}\n".encode("ascii")
    return header + m.cells.astype("<u2").tobytes(order="C")


def decode_map(data: bytes) -> SemanticMap:
    if not data.startswith(SLM_MAGIC):
        raise MapFormatError("missing SLM1 magic")
    rest = data[len(SLM_MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise MapFormatError("unterminated SLM1 dimension line")
    try:
        h, w, c = (int(tok) for tok in rest[:nl].decode("ascii").split(" "))
    except ValueError as exc:
        raise MapFormatError(f"bad SLM1 dimension line {rest[:nl]!r}") from exc
    if h <= 0 or w <= 0 or c < 1:
        raise MapFormatError(f"bad SLM1 dimensions H={h} W={w} C={c}")
    payload = rest[nl + 1:]
    need = 2 * h * w
    if len(payload) < need:
        raise TruncatedFileError(f"SLM1 payload has {len(payload)} bytes, expected {need}")
    if len(payload) > need:
        raise MapFormatError(f"SLM1 payload has {len(payload) - need} trailing bytes")
    cells = np.frombuffer(payload, dtype="<u2").reshape(h, w)
    if cells.max() > c:
        raise CellValueError(f"cell value {int(cells.max())} exceeds MASK={c}")
    return SemanticMap(cells, c)


def load_map(path: str | Path) -> SemanticMap:
    return decode_map(Path(path).read_bytes())


def save_map(m: SemanticMap, path: str | Path) -> None:
    atomic_write_bytes(path, encode_map(m))


# --------------------------------------------------------------------------
# Class statistics
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassStats:
    """Per-class area (``psi``) and rarity (``phi``) statistics.

    ``psi`` and ``phi`` hold ``inf`` for classes absent from the corpus.
    ``scale_factor`` multiplies every product ``psi * phi``.
    """

    num_classes: int
    psi: np.ndarray
    phi: np.ndarray
    phi_clamped: bool = False
    scale_factor: float | None = None
    unlabeled_class: int | None = None
    log_base: str = "e"
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        for name in ("psi", "phi"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != (self.num_classes,):
                raise ValueError(f"{name} must have shape ({self.num_classes},), got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def present(self) -> np.ndarray:
        return np.isfinite(self.psi)

    def products(self) -> np.ndarray:
        """Scaled ``psi * phi`` with absent classes set to the largest finite product."""
        prod = self.psi * self.phi
        if self.scale_factor is not None:
            prod = prod * self.scale_factor
        finite = np.isfinite(prod)
        if not finite.any():
            raise ValueError("no class has a finite psi*phi product")
        return np.where(finite, prod, prod[finite].max())

    def to_json(self) -> dict:
        def enc(a: np.ndarray) -> list:
            return [float(v) if math.isfinite(v) else None for v in a]

        return {
            "version": 1,
            "num_classes": self.num_classes,
            "log_base": self.log_base,
            "psi": enc(self.psi),
            "phi": enc(self.phi),
            "phi_clamped": self.phi_clamped,
            "scale_factor": self.scale_factor,
            "unlabeled_class": self.unlabeled_class,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ClassStats":
        if obj.get("version") != 1:
            raise MapFormatError(f"unsupported stats version {obj.get('version')!r}")
        if obj.get("log_base", "e") != "e":
            raise MapFormatError(f"unsupported log base {obj['log_base']!r}")

        def dec(xs: list) -> np.ndarray:
            return np.array([math.inf if v is None else float(v) for v in xs])

        return cls(
            num_classes=int(obj["num_classes"]),
            psi=dec(obj["psi"]),
            phi=dec(obj["phi"]),
            phi_clamped=bool(obj["phi_clamped"]),
            scale_factor=obj.get("scale_factor"),
            unlabeled_class=obj.get("unlabeled_class"),
        )


def save_stats(stats: ClassStats, path: str | Path, config: dict | None = None) -> None:
    obj = stats.to_json()
    obj["provenance"] = provenance(config)
    atomic_write_bytes(path, json.dumps(obj, indent=2).encode("utf-8"))


def load_stats(path: str | Path) -> ClassStats:
    return ClassStats.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def estimate_stats(
    corpus: Sequence[SemanticMap] | Iterable[SemanticMap],
    clamp_phi: bool = False,
    unlabeled_class: int | None = None,
    target_min_product: float | None = None,
) -> ClassStats:
    """Estimate ``psi`` (inverse mean area fraction) and ``phi`` (log inverse
    document frequency) for each class.

    Area fractions are averaged over the maps that contain the class, each map
    weighted equally. Sums are exact rationals so the result does not depend
    on corpus order.

    Args:
        corpus: Non-empty collection of MASK-free maps sharing ``num_classes``.
        clamp_phi: Raise every ``phi`` to at least 1.
        unlabeled_class: Recorded for downstream schedules; not used here.
        target_min_product: If given, rescale all products so the smallest
            (over present classes) equals this value.

    Raises:
        ValueError: empty corpus, mixed class counts or MASK cells.
    """
    maps = list(corpus)
    if not maps:
        raise ValueError("corpus is empty")
    C = maps[0].num_classes
    area_sum = [Fraction(0)] * C
    doc_count = [0] * C
    for m in maps:
        if m.num_classes != C:
            raise ValueError(f"mixed class counts in corpus: {C} vs {m.num_classes}")
        if m.has_mask():
            raise ValueError("corpus maps must not contain MASK cells")
        counts = np.bincount(m.cells.ravel(), minlength=C)
        total = m.cells.size
        for c in np.flatnonzero(counts):
            area_sum[c] += Fraction(int(counts[c]), total)
            doc_count[c] += 1

    n = len(maps)
    psi = np.full(C, math.inf)
    phi = np.full(C, math.inf)
    for c in range(C):
        if doc_count[c]:
            psi[c] = float(Fraction(doc_count[c]) / area_sum[c])
            phi[c] = math.log(n / doc_count[c])
    if clamp_phi:
        phi = np.maximum(phi, 1.0)

    scale = None
    if target_min_product is not None:
        if target_min_product <= 0:
            raise ValueError("target_min_product must be positive")
        prod = psi * phi
        finite = prod[np.isfinite(prod)]
        smallest = finite.min()
        if smallest <= 0:
            raise ValueError("cannot rescale: some present class has psi*phi == 0 (enable clamp_phi)")
        scale = float(target_min_product / smallest)

    return ClassStats(
        num_classes=C,
        psi=psi,
        phi=phi,
        phi_clamped=clamp_phi,
        scale_factor=scale,
        unlabeled_class=unlabeled_class,
    )


# --------------------------------------------------------------------------
# mIoU
# --------------------------------------------------------------------------


def class_ious(pred: SemanticMap, truth: SemanticMap, ignore: int | None = None) -> dict[int, float]:
    """IoU per class whose union is non-empty; ``ignore`` cells are dropped."""
    if pred.shape != truth.shape or pred.num_classes != truth.num_classes:
        raise ValueError(
            f"map mismatch: {pred.shape}/C={pred.num_classes} vs {truth.shape}/C={truth.num_classes}"
        )
    p = pred.cells.ravel().astype(np.int64)
    g = truth.cells.ravel().astype(np.int64)
    if ignore is not None:
        keep = (g != ignore) & (p != ignore)
        p, g = p[keep], g[keep]
    K = pred.num_classes + 1
    conf = np.bincount(g * K + p, minlength=K * K).reshape(K, K)
    inter = np.diag(conf)
    union = conf.sum(0) + conf.sum(1) - inter
    out = {}
    for c in range(K):
        if c == ignore or union[c] == 0:
            continue
        out[c] = inter[c] / union[c]
    return out


def miou(pred: SemanticMap, truth: SemanticMap, ignore: int | None = None) -> float:
    """Mean IoU over classes appearing in either map.

    >>> a = SemanticMap(np.array([[0, 0], [1, 1]]), 2)
    >>> b = SemanticMap(np.array([[0, 1], [1, 1]]), 2)
    >>> round(miou(a, b), 6)
    0.583333
    """
    ious = class_ious(pred, truth, ignore)
    if not ious:
        return float("nan")
    return float(np.mean(list(ious.values())))
