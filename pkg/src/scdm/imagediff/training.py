"""Hybrid loss and a plain-SGD training step for the per-pixel MLP denoiser."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from scdm.errors import TrainingError
from scdm.imagediff.denoisers import MLPDenoiser
from scdm.schedule import ImageSchedule, LabelSchedule


@dataclass(frozen=True)
class LossReport:
    l_simple: float
    l_vlb: float
    lambda_vlb: float
    t: np.ndarray
    dropped: np.ndarray

    @property
    def hybrid(self) -> float:
        return self.l_simple + self.lambda_vlb * self.l_vlb


def _per_sample(values, t: np.ndarray, ndim: int) -> np.ndarray:
    return np.asarray(values)[t - 1].reshape((-1,) + (1,) * (ndim - 1))


def _schedule_terms(sched: ImageSchedule, t: np.ndarray, ndim: int) -> dict[str, np.ndarray]:
    """Per-sample posterior coefficients for ``q(x_{t-1} | x_t, x0)``."""
    ab = sched.alpha_bar
    ab_prev = np.concatenate([[1.0], ab[:-1]])
    beta = 1.0 - ab / ab_prev
    post_var = (1.0 - ab_prev) / (1.0 - ab) * beta
    # t=1 has zero posterior variance; borrow the t=2 value so logs stay finite
    clipped = post_var.copy()
    clipped[0] = post_var[1] if sched.T > 1 else beta[0]
    return {
        "ab": _per_sample(ab, t, ndim),
        "coef_x0": _per_sample(np.sqrt(ab_prev) * beta / (1.0 - ab), t, ndim),
        "coef_xt": _per_sample(np.sqrt(ab / ab_prev) * (1.0 - ab_prev) / (1.0 - ab), t, ndim),
        "log_post_var": _per_sample(np.log(clipped), t, ndim),
        "log_beta": _per_sample(np.log(beta), t, ndim),
    }


def hybrid_terms(
    x0: np.ndarray,
    x_t: np.ndarray,
    eps: np.ndarray,
    eps_pred: np.ndarray,
    var_logit: np.ndarray | None,
    t: np.ndarray,
    sched: ImageSchedule,
) -> tuple[float, float, np.ndarray, np.ndarray | None]:
    """Return ``(L_simple, L_vlb, dL_simple/d eps_pred, dL_vlb/d var_logit)``.

    ``L_vlb`` is the mean Gaussian ``KL(q(x_{t-1}|x_t,x0) || p(x_{t-1}|x_t,y_t))``
    in nats per component. The model mean enters with its gradient stopped, so
    ``L_vlb`` only trains the variance. Without a variance output ``L_vlb`` is
    evaluated at the fixed posterior variance and has no gradient.
    """
    n = eps.size
    diff = eps_pred - eps
    l_simple = float(np.mean(diff**2))
    d_eps = 2.0 * diff / n

    s = _schedule_terms(sched, np.asarray(t), x0.ndim)
    mu_q = s["coef_x0"] * x0 + s["coef_xt"] * x_t
    x0_pred = (x_t - np.sqrt(1.0 - s["ab"]) * eps_pred) / np.sqrt(s["ab"])
    mu_p = s["coef_x0"] * x0_pred + s["coef_xt"] * x_t  # treated as a constant
    log_q = s["log_post_var"]
    if var_logit is None:
        log_p = np.broadcast_to(log_q, x0.shape)
    else:
        frac = (var_logit + 1.0) / 2.0
        log_p = frac * s["log_beta"] + (1.0 - frac) * log_q
    kl = 0.5 * (log_p - log_q + (np.exp(log_q) + (mu_q - mu_p) ** 2) * np.exp(-log_p) - 1.0)
    l_vlb = float(np.mean(kl))
    d_var = None
    if var_logit is not None:
        d_logp = 0.5 * (1.0 - (np.exp(log_q) + (mu_q - mu_p) ** 2) * np.exp(-log_p))
        d_var = d_logp * 0.5 * (s["log_beta"] - log_q) / n
    return l_simple, l_vlb, d_eps, d_var


def prepare_batch(
    x0: np.ndarray,
    y0_cells: np.ndarray,
    label_sched: LabelSchedule,
    image_sched: ImageSchedule,
    drop_rate: float,
    rng: np.random.Generator,
) -> dict[str, np.ndarray]:
    """Draw ``t``, image noise, diffused labels and classifier-free drops."""
    B = x0.shape[0]
    t = rng.integers(1, image_sched.T + 1, size=B)
    eps = rng.standard_normal(x0.shape)
    ab = image_sched.alpha_bar[t - 1].reshape((B,) + (1,) * (x0.ndim - 1))
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    u = rng.random(y0_cells.shape)
    mask_value = label_sched.num_classes
    gam = np.stack([np.append(label_sched.gamma_at(int(tt)), 1.0)[y0_cells[i]] for i, tt in enumerate(t)])
    y_t = np.where(u >= gam, y0_cells, mask_value)
    dropped = rng.random(B) < drop_rate
    y_t[dropped] = mask_value
    return {"t": t, "eps": eps, "x_t": x_t, "y_t": y_t, "dropped": dropped}


def model_loss(
    model: MLPDenoiser, x0: np.ndarray, batch: dict, image_sched: ImageSchedule, lambda_vlb: float
) -> tuple[float, float, dict[str, np.ndarray]]:
    """Forward + backward for a prepared batch; returns losses and gradients."""
    eps_pred, var_logit, cache = model.forward(batch["x_t"], batch["y_t"], batch["t"])
    l_simple, l_vlb, d_eps, d_var = hybrid_terms(
        x0, batch["x_t"], batch["eps"], eps_pred, var_logit, batch["t"], image_sched
    )
    grads = model.backward(cache, d_eps, lambda_vlb * d_var if d_var is not None else None)
    return l_simple, l_vlb, grads


def train_step(
    model: MLPDenoiser,
    x0: np.ndarray,
    y0_cells: np.ndarray,
    label_sched: LabelSchedule,
    image_sched: ImageSchedule,
    rng: np.random.Generator,
    lambda_vlb: float = 0.001,
    drop_rate: float = 0.2,
    lr: float = 0.05,
) -> LossReport:
    """One SGD step on ``L_simple + lambda_vlb * L_vlb``; updates ``model`` in place."""
    if lambda_vlb < 0:
        raise ValueError("lambda_vlb must be >= 0")
    if not 0.0 <= drop_rate <= 1.0:
        raise ValueError("drop_rate must lie in [0, 1]")
    batch = prepare_batch(x0, y0_cells, label_sched, image_sched, drop_rate, rng)
    l_simple, l_vlb, grads = model_loss(model, x0, batch, image_sched, lambda_vlb)
    if not (math.isfinite(l_simple) and math.isfinite(l_vlb)):
        raise TrainingError(
            f"non-finite loss (L_simple={l_simple}, L_vlb={l_vlb}) at t={batch['t'].tolist()}"
        )
    for name, g in grads.items():
        model.params[name] -= lr * g
    return LossReport(l_simple, l_vlb, lambda_vlb, batch["t"], batch["dropped"])
