"""Class-wise label noise schedules, absorbing transition matrices and the
continuous image noise schedule.

Steps are 1-based. A label schedule stores ``gamma[t-1, c]`` for step ``t``,
evaluated at the ratio ``r = (t - 1) / T`` so stored values never reach 1.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Union

import numpy as np

from scdm._io import atomic_write_bytes, provenance
from scdm.errors import InvariantError, MapFormatError, NumericError
from scdm.labelmap import ClassStats

ETA_INF = "inf"
Eta = Union[float, Literal["inf"]]
Mode = Literal["class_wise", "uniform", "none"]

# Products this close to 1 use the uniform limit instead of the 0/0 formula.
_UNIT_PRODUCT_RTOL = 1e-9


def normalize_eta(eta: Eta) -> Eta:
    if isinstance(eta, str):
        if eta != ETA_INF:
            raise ValueError(f"eta must be a non-negative number or 'inf', got {eta!r}")
        return ETA_INF
    eta = float(eta)
    if math.isinf(eta) and eta > 0:
        return ETA_INF
    if not eta >= 0:
        raise ValueError(f"eta must be non-negative, got {eta}")
    return eta


def step_ratio(t: int, T: int) -> float:
    """``(t - 1) / T``, the schedule position of stored step ``t``."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 1 <= t <= T:
        raise ValueError(f"step t={t} outside [1, {T}]")
    return (t - 1) / T


def gamma_ratio(product: float, eta: Eta, r: float, mode: Mode = "class_wise") -> float:
    """Masking probability at schedule position ``r`` in ``[0, 1]``.

    Computes ``(p**(eta*r) - 1) / (p**eta - 1)`` with ``p = product``. Large
    exponents are evaluated as ``p**(eta*(r-1)) * (1 - p**(-eta*r)) / (1 - p**(-eta))``
    so ``eta`` in the thousands does not overflow.
    """
    eta = normalize_eta(eta)
    if mode == "none" or eta == ETA_INF:
        return 0.0
    if mode == "uniform":
        return float(r)
    if mode != "class_wise":
        raise ValueError(f"unknown schedule mode {mode!r}")
    if not product > 1:
        raise ValueError(f"class-wise schedule needs psi*phi > 1, got {product}")
    if r == 0:
        return 0.0
    if eta == 0:
        return float(r)
    a = eta * math.log1p(product - 1.0)
    if a <= 1.0:
        g = math.expm1(a * r) / math.expm1(a)
    else:
        g = math.exp(a * (r - 1.0)) * math.expm1(-a * r) / math.expm1(-a)
    if not math.isfinite(g):
        raise NumericError(f"non-finite gamma for product={product}, eta={eta}, r={r}")
    return g


def gamma_eval(product: float, eta: Eta, t: int, T: int, mode: Mode = "class_wise") -> float:
    """Class-wise masking probability for stored step ``t`` (t-1 convention).

    >>> round(gamma_eval(651.3, 1.0, 26, 50), 5)
    0.03771
    >>> gamma_eval(17.3, 1.0, 1, 50)
    0.0
    """
    return gamma_ratio(product, eta, step_ratio(t, T), mode)


@dataclass(frozen=True)
class LabelSchedule:
    """Tabulated ``gamma`` for steps ``1..T`` and classes ``0..C-1``."""

    T: int
    num_classes: int
    eta: Eta
    gamma: np.ndarray
    modes: tuple[str, ...]
    products: np.ndarray

    def __post_init__(self) -> None:
        g = np.array(self.gamma, dtype=float)
        if g.shape != (self.T, self.num_classes):
            raise ValueError(f"gamma must have shape ({self.T}, {self.num_classes}), got {g.shape}")
        if (g < 0).any() or (g > 1).any():
            raise ValueError("gamma entries must lie in [0, 1]")
        if (np.diff(g, axis=0) < 0).any():
            raise ValueError("gamma must be nondecreasing in t")
        g.setflags(write=False)
        p = np.array(self.products, dtype=float)
        p.setflags(write=False)
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "products", p)
        object.__setattr__(self, "eta", normalize_eta(self.eta))

    @classmethod
    def from_gamma(cls, gamma: np.ndarray, eta: Eta = 1.0) -> "LabelSchedule":
        """Wrap an explicit ``(T, C)`` gamma table (tests, external schedules)."""
        g = np.asarray(gamma, dtype=float)
        T, C = g.shape
        return cls(T, C, eta, g, ("custom",) * C, np.full(C, np.nan))

    @classmethod
    def from_betas(cls, betas: np.ndarray, eta: Eta = 1.0) -> "LabelSchedule":
        """Build from per-step masking probabilities ``betas[t-1, c]``."""
        b = np.asarray(betas, dtype=float)
        return cls.from_gamma(1.0 - np.cumprod(1.0 - b, axis=0), eta)

    @property
    def mask_value(self) -> int:
        return self.num_classes

    @property
    def has_diffusion(self) -> bool:
        return bool(self.gamma.any())

    @property
    def schedule_id(self) -> str:
        h = hashlib.sha1(self.gamma.tobytes())
        h.update(str(self.eta).encode())
        return h.hexdigest()[:16]

    def gamma_at(self, t: int) -> np.ndarray:
        step_ratio(t, self.T)
        return self.gamma[t - 1]

    def gamma_cells(self, cells: np.ndarray, t: int) -> np.ndarray:
        """Per-cell masking probability; MASK cells get 1."""
        row = np.append(self.gamma_at(t), 1.0)
        return row[cells]

    def to_json(self) -> dict:
        return {
            "T": self.T,
            "num_classes": self.num_classes,
            "eta": self.eta if self.eta == ETA_INF else float(self.eta),
            "gamma": self.gamma.tolist(),
            "modes": list(self.modes),
            "products": [None if not math.isfinite(p) else float(p) for p in self.products],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LabelSchedule":
        gamma = np.array(obj["gamma"], dtype=float)
        T, C = gamma.shape
        prods = np.array([np.nan if p is None else p for p in obj.get("products", [None] * C)], dtype=float)
        modes = tuple(obj.get("modes", ["custom"] * C))
        return cls(T, C, obj["eta"], gamma, modes, prods)


def build_label_schedule(
    stats: ClassStats | np.ndarray,
    T: int,
    eta: Eta = 1.0,
    uniform_classes: Iterable[int] = (),
) -> LabelSchedule:
    """Tabulate the class-wise schedule.

    ``stats`` may be a :class:`ClassStats` or a plain array of ``psi*phi``
    products. Classes in ``uniform_classes`` (plus the stats' unlabeled class)
    follow ``gamma = r``. ``eta='inf'`` disables label diffusion entirely.
    """
    if isinstance(stats, ClassStats):
        products = stats.products()
        uniform = set(uniform_classes)
        if stats.unlabeled_class is not None:
            uniform.add(stats.unlabeled_class)
    else:
        products = np.asarray(stats, dtype=float)
        uniform = set(uniform_classes)
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    eta = normalize_eta(eta)
    C = len(products)
    bad = [c for c in uniform if not 0 <= c < C]
    if bad:
        raise ValueError(f"uniform classes {bad} outside [0, {C})")

    modes: list[str] = []
    for c in range(C):
        if eta == ETA_INF:
            modes.append("none")
        elif c in uniform or abs(products[c] - 1.0) <= _UNIT_PRODUCT_RTOL:
            modes.append("uniform")
        else:
            modes.append("class_wise")

    gamma = np.empty((T, C))
    for c in range(C):
        for t in range(1, T + 1):
            gamma[t - 1, c] = gamma_eval(products[c], eta, t, T, modes[c])
    return LabelSchedule(T, C, eta, gamma, tuple(modes), products)


def step_betas(schedule: LabelSchedule) -> np.ndarray:
    """All one-step masking probabilities, shape ``(T, C)``."""
    g = schedule.gamma
    prev = np.vstack([np.zeros((1, schedule.num_classes)), g[:-1]])
    if (prev >= 1).any():
        raise InvariantError("gamma reached 1 before the last step; one-step beta undefined")
    return 1.0 - (1.0 - g) / (1.0 - prev)


def step_beta(schedule: LabelSchedule, t: int, c: int) -> float:
    """``beta_{t,c} = 1 - (1 - gamma_t) / (1 - gamma_{t-1})``; ``gamma_1`` at t=1."""
    g_t = schedule.gamma_at(t)[c]
    if t == 1:
        return float(g_t)
    g_prev = schedule.gamma_at(t - 1)[c]
    if g_prev >= 1:
        raise InvariantError(f"gamma_{{t-1}} = 1 for class {c} at t={t}")
    return float(1.0 - (1.0 - g_t) / (1.0 - g_prev))


def _absorbing_matrix(keep: np.ndarray) -> np.ndarray:
    C = len(keep)
    Q = np.zeros((C + 1, C + 1))
    Q[np.arange(C), np.arange(C)] = keep
    Q[C, :C] = 1.0 - keep
    Q[C, C] = 1.0
    return Q


def transition_matrix(schedule: LabelSchedule, t: int) -> np.ndarray:
    """One-step ``(C+1) x (C+1)`` column-stochastic matrix ``Q_t``.

    Entry ``[i, j]`` is ``q(z_t = i | z_{t-1} = j)``; the last index is MASK.
    """
    step_ratio(t, schedule.T)
    beta = step_betas(schedule)[t - 1]
    return _absorbing_matrix(1.0 - beta)


def cumulative_marginal(schedule: LabelSchedule, t: int) -> np.ndarray:
    """Closed-form ``Q_t ... Q_1``: ``1 - gamma`` on the diagonal, ``gamma`` into MASK."""
    return _absorbing_matrix(1.0 - schedule.gamma_at(t))


@dataclass(frozen=True)
class Prop1Report:
    product: float
    T: int
    small_eta: float
    large_eta: float
    small_eta_error: float
    large_eta_max: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.small_eta_error <= self.tolerance and self.large_eta_max <= self.tolerance

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["passed"] = self.passed
        return d


def verify_prop1(
    product: float, T: int, tolerance: float = 1e-5, small_eta: float = 1e-8, large_eta: float = 1e4
) -> Prop1Report:
    """Check the ``eta -> 0`` (uniform) and ``eta -> inf`` (no diffusion) limits.

    >>> verify_prop1(651.3, 50).passed
    True
    """
    small_err = 0.0
    large_max = 0.0
    for t in range(1, T + 1):
        r = step_ratio(t, T)
        small_err = max(small_err, abs(gamma_eval(product, small_eta, t, T) - r))
        large_max = max(large_max, abs(gamma_eval(product, large_eta, t, T)))
    return Prop1Report(product, T, small_eta, large_eta, small_err, large_max, tolerance)


# --------------------------------------------------------------------------
# Image schedule
# --------------------------------------------------------------------------


def default_linear_params(T: int) -> dict:
    """Linear betas 1e-4 -> 0.02 at T=1000, stretched for shorter chains."""
    scale = 1000.0 / T
    return {"beta_start": min(1e-4 * scale, 0.999), "beta_end": min(0.02 * scale, 0.999)}


@dataclass(frozen=True)
class ImageSchedule:
    """Cumulative signal level ``alpha_bar[t-1]`` for steps ``1..T``."""

    T: int
    alpha_bar: np.ndarray
    kind: str = "linear_beta"
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        a = np.array(self.alpha_bar, dtype=float)
        if a.shape != (self.T,):
            raise ValueError(f"alpha_bar must have length {self.T}")
        if (a <= 0).any() or (a > 1).any():
            raise ValueError("alpha_bar entries must lie in (0, 1]")
        if (np.diff(a) >= 0).any():
            raise ValueError("alpha_bar must be strictly decreasing")
        a.setflags(write=False)
        object.__setattr__(self, "alpha_bar", a)

    def ab(self, t: int) -> float:
        """``alpha_bar`` at step ``t``, with ``alpha_bar_0 = 1``."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ValueError(f"step t={t} outside [0, {self.T}]")
        return float(self.alpha_bar[t - 1])

    def betas(self) -> np.ndarray:
        prev = np.concatenate([[1.0], self.alpha_bar[:-1]])
        return 1.0 - self.alpha_bar / prev

    def posterior_variance(self, t: int, t_prev: int | None = None) -> float:
        """``beta-tilde`` between ``t`` and ``t_prev`` (default ``t - 1``)."""
        if t_prev is None:
            t_prev = t - 1
        a_t, a_p = self.ab(t), self.ab(t_prev)
        return max((1.0 - a_p) / (1.0 - a_t) * (1.0 - a_t / a_p), 0.0)

    def step_variance(self, t: int, t_prev: int | None = None) -> float:
        if t_prev is None:
            t_prev = t - 1
        return 1.0 - self.ab(t) / self.ab(t_prev)

    def to_json(self) -> dict:
        return {"T": self.T, "alpha_bar": self.alpha_bar.tolist(), "kind": self.kind, "params": dict(self.params)}


def build_image_schedule(T: int, kind: str = "linear_beta", **params) -> ImageSchedule:
    """Linear-beta or squared-cosine ``alpha_bar`` table.

    linear_beta: ``beta_start``, ``beta_end`` (or ``beta`` for a constant);
    defaults follow :func:`default_linear_params`. cosine: offset ``s=0.008``
    and per-step betas capped at ``max_beta=0.999``.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if kind == "linear_beta":
        if "beta" in params:
            params = {"beta_start": params["beta"], "beta_end": params["beta"]}
        params = {**default_linear_params(T), **params}
        betas = np.linspace(params["beta_start"], params["beta_end"], T)
        if (betas <= 0).any():
            raise ValueError("linear betas must be positive for a strictly decreasing alpha_bar")
    elif kind == "cosine":
        params = {"s": 0.008, "max_beta": 0.999, **params}
        s = params["s"]
        f = np.cos((np.arange(T + 1) / T + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.minimum(1.0 - f[1:] / f[:-1], params["max_beta"])
    else:
        raise ValueError(f"unknown image schedule kind {kind!r}")
    if (betas >= 1).any():
        raise ValueError("per-step betas must be < 1 (alpha_bar would reach 0)")
    alpha_bar = np.cumprod(1.0 - betas)
    if (alpha_bar <= 0).any():
        raise ValueError("schedule parameters drive alpha_bar to 0")
    return ImageSchedule(T, alpha_bar, kind, {k: float(v) for k, v in params.items()})


# --------------------------------------------------------------------------
# Schedule dump
# --------------------------------------------------------------------------


def schedules_to_json(label: LabelSchedule, image: ImageSchedule, config: dict | None = None) -> dict:
    if label.T != image.T:
        raise ValueError(f"label T={label.T} and image T={image.T} differ")
    lab = label.to_json()
    img = image.to_json()
    return {
        "version": 1,
        "T": label.T,
        "eta": lab["eta"],
        "gamma": lab["gamma"],
        "alpha_bar": img["alpha_bar"],
        "kind": img["kind"],
        "params": img["params"],
        "num_classes": label.num_classes,
        "modes": lab["modes"],
        "products": lab["products"],
        "provenance": provenance(config),
    }


def schedules_from_json(obj: dict) -> tuple[LabelSchedule, ImageSchedule]:
    if obj.get("version") != 1:
        raise MapFormatError(f"unsupported schedule version {obj.get('version')!r}")
    label = LabelSchedule.from_json(obj)
    image = ImageSchedule(int(obj["T"]), np.array(obj["alpha_bar"]), obj["kind"], obj.get("params", {}))
    return label, image


def save_schedules(path: str | Path, label: LabelSchedule, image: ImageSchedule, config: dict | None = None) -> None:
    atomic_write_bytes(path, json.dumps(schedules_to_json(label, image, config)).encode("utf-8"))


def load_schedules(path: str | Path) -> tuple[LabelSchedule, ImageSchedule]:
    return schedules_from_json(json.loads(Path(path).read_text(encoding="utf-8")))
