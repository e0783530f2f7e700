"""Toy images, the SIM1 format and a class-conditional Gaussian image model."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from scdm._io import atomic_write_bytes
from scdm.errors import MapFormatError, TruncatedFileError
from scdm.labelmap import SemanticMap
from scdm.schedule import ImageSchedule

SIM_MAGIC = b"SIM1\n"


def encode_image(x: np.ndarray) -> bytes:
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[..., None]
    if x.ndim != 3 or x.size == 0:
        raise ValueError(f"image must be (H, W, CH), got shape {x.shape}")
    if not np.isfinite(x).all():
        raise ValueError("image contains non-finite values")
    h, w, ch = x.shape
    return SIM_MAGIC + f"{h} {w} {ch}\n".encode("ascii") + x.astype("<f4").tobytes(order="C")


def decode_image(data: bytes) -> np.ndarray:
    if not data.startswith(SIM_MAGIC):
        raise MapFormatError("missing SIM1 magic")
    rest = data[len(SIM_MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise MapFormatError("unterminated SIM1 dimension line")
    try:
        h, w, ch = (int(tok) for tok in rest[:nl].decode("ascii").split(" "))
    except ValueError as exc:
        raise MapFormatError(f"bad SIM1 dimension line {rest[:nl]!r}") from exc
    if min(h, w, ch) <= 0:
        raise MapFormatError(f"bad SIM1 dimensions {h}x{w}x{ch}")
    payload = rest[nl + 1:]
    need = 4 * h * w * ch
    if len(payload) < need:
        raise TruncatedFileError(f"SIM1 payload has {len(payload)} bytes, expected {need}")
    if len(payload) > need:
        raise MapFormatError(f"SIM1 payload has {len(payload) - need} trailing bytes")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, ch).astype(np.float32)


def save_image(x: np.ndarray, path: str | Path) -> None:
    atomic_write_bytes(path, encode_image(x))


def load_image(path: str | Path) -> np.ndarray:
    return decode_image(Path(path).read_bytes())


@dataclass(frozen=True)
class ToyDataSpec:
    """Pixels of class ``c`` are ``N(class_means[c], sigma0^2 I)``, independently."""

    class_means: np.ndarray
    sigma0: float
    class_prior: np.ndarray

    def __post_init__(self) -> None:
        m = np.atleast_2d(np.array(self.class_means, dtype=float))
        p = np.array(self.class_prior, dtype=float)
        if p.shape != (m.shape[0],):
            raise ValueError(f"class_prior must have {m.shape[0]} entries")
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("class_prior must be a probability vector")
        if self.sigma0 < 0:
            raise ValueError("sigma0 must be >= 0")
        m.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "class_means", m)
        object.__setattr__(self, "class_prior", p)
        object.__setattr__(self, "sigma0", float(self.sigma0))

    @property
    def num_classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def channels(self) -> int:
        return self.class_means.shape[1]

    def mean_image(self, y0: SemanticMap | np.ndarray) -> np.ndarray:
        cells = y0.cells if isinstance(y0, SemanticMap) else np.asarray(y0)
        return self.class_means[cells]

    def sample_x0(self, y0: SemanticMap | np.ndarray, rng: np.random.Generator) -> np.ndarray:
        mean = self.mean_image(y0)
        return mean + self.sigma0 * rng.standard_normal(mean.shape)

    def to_json(self) -> dict:
        return {
            "class_means": self.class_means.tolist(),
            "sigma0": self.sigma0,
            "class_prior": self.class_prior.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ToyDataSpec":
        return cls(np.array(obj["class_means"]), float(obj["sigma0"]), np.array(obj["class_prior"]))

    @classmethod
    def load(cls, path: str | Path) -> "ToyDataSpec":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def forward_noise(
    x0: np.ndarray, sched: ImageSchedule, t: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """``x_t = sqrt(ab) x0 + sqrt(1 - ab) eps``; returns ``(x_t, eps)``."""
    ab = sched.ab(t)
    eps = rng.standard_normal(np.shape(x0))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps, eps


def random_block_map(
    shape: tuple[int, int],
    num_classes: int,
    rng: np.random.Generator,
    classes: np.ndarray | None = None,
    n_rects: int = 3,
) -> SemanticMap:
    """A background class with a few axis-aligned rectangles painted over it."""
    pool = np.arange(num_classes) if classes is None else np.asarray(classes)
    H, W = shape
    cells = np.full(shape, rng.choice(pool), dtype=np.uint16)
    for _ in range(n_rects):
        h = int(rng.integers(1, max(2, H // 2) + 1))
        w = int(rng.integers(1, max(2, W // 2) + 1))
        i = int(rng.integers(0, H - h + 1))
        j = int(rng.integers(0, W - w + 1))
        cells[i:i + h, j:j + w] = rng.choice(pool)
    return SemanticMap(cells, num_classes)
