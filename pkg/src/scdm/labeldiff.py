"""Label Diffusion: the absorbing-state forward process on label maps.

Cells move only from their class to MASK, never between classes. A whole
trajectory ``y_1..y_T`` is stored as one matrix of first-masking steps
(:class:`MaskTimeMatrix`), sampled by inverting the per-class CDF
``P(mask_time <= t) = gamma[t, c]`` with one uniform draw per cell.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from scdm._io import provenance, write_json
from scdm.errors import NumericError
from scdm.labelmap import SemanticMap, save_map
from scdm.schedule import LabelSchedule, step_betas, step_ratio


def _check_compatible(y: SemanticMap, schedule: LabelSchedule) -> None:
    if y.num_classes != schedule.num_classes:
        raise ValueError(f"map has C={y.num_classes}, schedule has C={schedule.num_classes}")


def diffuse_step(y_prev: SemanticMap, schedule: LabelSchedule, t: int, rng: np.random.Generator) -> SemanticMap:
    """One forward step: each class-``c`` cell is masked w.p. ``beta[t, c]``."""
    _check_compatible(y_prev, schedule)
    step_ratio(t, schedule.T)
    beta = np.append(step_betas(schedule)[t - 1], 1.0)
    u = rng.random(y_prev.shape)
    masked = u < beta[y_prev.cells]
    return y_prev.with_cells(np.where(masked, y_prev.mask_value, y_prev.cells))


def diffuse_to(y0: SemanticMap, schedule: LabelSchedule, t: int, rng: np.random.Generator) -> SemanticMap:
    """Sample ``y_t ~ q(y_t | y_0)`` directly: masked w.p. ``gamma[t, c]``.

    A cell keeps its label iff its uniform draw is ``>= gamma``.
    """
    _check_compatible(y0, schedule)
    if y0.has_mask():
        raise ValueError("y0 must not contain MASK cells")
    u = rng.random(y0.shape)
    return mask_with_uniforms(y0, schedule, t, u)


def mask_with_uniforms(y0: SemanticMap, schedule: LabelSchedule, t: int, u: np.ndarray) -> SemanticMap:
    g = schedule.gamma_cells(y0.cells, t)
    return y0.with_cells(np.where(u < g, y0.mask_value, y0.cells))


@dataclass(frozen=True)
class MaskTimeMatrix:
    """First step at which each cell is masked; ``never`` (= T+1) if it survives."""

    mask_time: np.ndarray
    T: int
    schedule_id: str = ""

    def __post_init__(self) -> None:
        mt = np.array(self.mask_time, dtype=np.int64)
        if mt.ndim != 2:
            raise ValueError("mask_time must be 2-D")
        if mt.size and (mt.min() < 1 or mt.max() > self.T + 1):
            raise ValueError(f"mask times must lie in [1, {self.T + 1}]")
        mt.setflags(write=False)
        object.__setattr__(self, "mask_time", mt)

    @property
    def never(self) -> int:
        return self.T + 1

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask_time.shape

    def to_map(self) -> SemanticMap:
        """Encode as an SLM1-compatible map with ``C = T + 1``."""
        return SemanticMap(self.mask_time, self.T + 1)


def mask_times_from_uniforms(y0: SemanticMap, schedule: LabelSchedule, u: np.ndarray) -> MaskTimeMatrix:
    """Inverse-CDF step: ``mask_time = min{t : gamma[t, c] > u}``."""
    _check_compatible(y0, schedule)
    if y0.has_mask():
        raise ValueError("y0 must not contain MASK cells")
    u = np.asarray(u, dtype=float)
    if u.shape != y0.shape:
        raise ValueError(f"uniforms shape {u.shape} != map shape {y0.shape}")
    out = np.empty(y0.shape, dtype=np.int64)
    for c in np.unique(y0.cells):
        sel = y0.cells == c
        # count of gamma <= u is the 0-based index of the first gamma > u
        out[sel] = np.searchsorted(schedule.gamma[:, c], u[sel], side="right") + 1
    return MaskTimeMatrix(out, schedule.T, schedule.schedule_id)


def sample_mask_times(y0: SemanticMap, schedule: LabelSchedule, rng: np.random.Generator) -> MaskTimeMatrix:
    return mask_times_from_uniforms(y0, schedule, rng.random(y0.shape))


def reconstruct(U: MaskTimeMatrix, y0: SemanticMap, t: int) -> SemanticMap:
    """``y_t`` from the mask-time matrix: MASK where ``mask_time <= t``."""
    if U.shape != y0.shape:
        raise ValueError(f"mask-time shape {U.shape} != map shape {y0.shape}")
    if not 0 <= t <= U.T:
        raise ValueError(f"step t={t} outside [0, {U.T}]")
    return y0.with_cells(np.where(U.mask_time <= t, y0.mask_value, y0.cells))


def save_trajectory(U: MaskTimeMatrix, path: str | Path, config: dict | None = None) -> Path:
    """Write ``U`` as SLM1 plus a ``.json`` sidecar describing the encoding."""
    path = Path(path)
    save_map(U.to_map(), path)
    side = path.with_suffix(path.suffix + ".json")
    write_json(
        side,
        {
            "comment": f"mask-time matrix stored as SLM1 with C=T+1={U.T + 1}; "
            f"cell value t in 1..{U.T} is the first masked step, {U.T + 1} means never masked",
            "T": U.T,
            "never": U.never,
            "schedule_id": U.schedule_id,
            "provenance": provenance(config),
        },
    )
    return side


def load_trajectory(path: str | Path) -> MaskTimeMatrix:
    from scdm.labelmap import load_map

    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text(encoding="utf-8"))
    m = load_map(path)
    return MaskTimeMatrix(m.cells, int(meta["T"]), meta.get("schedule_id", ""))


# --------------------------------------------------------------------------
# Implicit-classifier gradient identity
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ImplicitClassifier:
    """``f(x) = softmax(W x)`` over ``C`` classes; MASK has probability 0."""

    weight: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def probs(self, x: np.ndarray) -> np.ndarray:
        z = self.weight @ x
        z = z - z.max()
        e = np.exp(z)
        return e / e.sum()

    def probs_ext(self, x: np.ndarray) -> np.ndarray:
        """``f(x)`` extended with a zero MASK entry."""
        return np.append(self.probs(x), 0.0)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        """``d f / d x`` with shape ``(C, dim)``."""
        f = self.probs(x)
        return (np.diag(f) - np.outer(f, f)) @ self.weight


@dataclass(frozen=True)
class Prop2Report:
    gamma_t: float
    lhs: np.ndarray
    rhs: np.ndarray
    lhs_fd: np.ndarray
    analytic_error: float
    fd_error: float
    tolerance: float
    fd_tolerance: float = 1e-6

    @property
    def passed(self) -> bool:
        return self.analytic_error <= self.tolerance and self.fd_error <= self.fd_tolerance

    def to_json(self) -> dict:
        return {
            "gamma_t": self.gamma_t,
            "analytic_error": self.analytic_error,
            "fd_error": self.fd_error,
            "tolerance": self.tolerance,
            "fd_tolerance": self.fd_tolerance,
            "passed": self.passed,
        }


def verify_prop2(
    clf: ImplicitClassifier,
    x: np.ndarray,
    y0: int,
    gamma_t: float,
    tolerance: float = 1e-10,
    h: float = 1e-5,
) -> Prop2Report:
    """Compare ``E_{y_t|y_0}[grad log q(y_t|x)]`` with ``(1-gamma) grad log f_{y0}(x)``.

    The expectation enumerates ``y_t in {y0, MASK}``. Gradients of
    ``log q(y_t|x) = log(e_{y_t}^T Qbar f(x))`` come from the softmax Jacobian
    and, independently, from central differences with step ``h``.
    """
    x = np.asarray(x, dtype=float)
    C = clf.num_classes
    if not 0 <= y0 < C:
        raise ValueError(f"y0={y0} outside [0, {C})")
    if not 0.0 <= gamma_t <= 1.0:
        raise ValueError(f"gamma_t must lie in [0, 1], got {gamma_t}")
    f0 = clf.probs(x)[y0]
    if f0 <= 0:
        raise NumericError(f"f_{y0}(x) underflows to 0; identity is degenerate")

    keep = np.full(C, 1.0 - gamma_t)
    Qbar = np.zeros((C + 1, C + 1))
    Qbar[np.arange(C), np.arange(C)] = keep
    Qbar[C, :C] = gamma_t
    Qbar[C, C] = 1.0
    e0 = np.zeros(C + 1)
    e0[y0] = 1.0
    q_yt_given_y0 = Qbar @ e0

    J = np.vstack([clf.jacobian(x), np.zeros((1, x.size))])  # MASK row of f is identically 0

    def log_q(yt: int, xv: np.ndarray) -> float:
        return float(np.log(Qbar[yt] @ clf.probs_ext(xv)))

    lhs = np.zeros_like(x)
    lhs_fd = np.zeros_like(x)
    for yt in (y0, C):
        w = q_yt_given_y0[yt]
        if w == 0:
            continue
        row = Qbar[yt]
        lhs += w * (J.T @ row) / (row @ clf.probs_ext(x))
        grad_fd = np.empty_like(x)
        for k in range(x.size):
            dx = np.zeros_like(x)
            dx[k] = h
            grad_fd[k] = (log_q(yt, x + dx) - log_q(yt, x - dx)) / (2 * h)
        lhs_fd += w * grad_fd

    rhs = (1.0 - gamma_t) * (J[y0] / f0)
    return Prop2Report(
        gamma_t=gamma_t,
        lhs=lhs,
        rhs=rhs,
        lhs_fd=lhs_fd,
        analytic_error=float(np.max(np.abs(lhs - rhs))),
        fd_error=float(np.max(np.abs(lhs_fd - lhs))),
        tolerance=tolerance,
    )
