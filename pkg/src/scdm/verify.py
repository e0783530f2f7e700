"""Numerical verification checks, each returning a JSON-ready report.

Every check pairs an implementation path with an independent route:
high-precision limits, explicit matrix products, trajectory enumeration,
quadrature or finite differences.
"""

from __future__ import annotations

import time
import warnings
from typing import Callable

import numpy as np
from scipy import integrate

from scdm import rng as rngmod
from scdm.imagediff.denoisers import MLPDenoiser, OracleDenoiser
from scdm.imagediff.toy import ToyDataSpec
from scdm.imagediff.training import hybrid_terms, model_loss, prepare_batch
from scdm.labeldiff import ImplicitClassifier, mask_times_from_uniforms, verify_prop2
from scdm.labelmap import SemanticMap
from scdm.schedule import (
    LabelSchedule,
    build_image_schedule,
    build_label_schedule,
    cumulative_marginal,
    step_betas,
    transition_matrix,
    verify_prop1,
)

TARGETS = ("prop1", "prop2", "marginal", "trajectory", "oracle", "gradcheck")
REFERENCE_PRODUCTS = (17.3, 651.3)


def check_prop1(products=REFERENCE_PRODUCTS, T: int = 50, tolerance: float = 1e-5, **_) -> dict:
    reports = [verify_prop1(p, T, tolerance).to_json() for p in products]
    return {"passed": all(r["passed"] for r in reports), "reports": reports}


def check_prop2(
    n_classifiers: int = 100, gammas=(0.1, 0.5, 0.9), num_classes: int = 3, dim: int = 2,
    tolerance: float = 1e-10, seed: int = 0, **_,
) -> dict:
    rng = rngmod.stream(seed, "verify.prop2")
    worst_analytic = worst_fd = 0.0
    passed = True
    for g in gammas:
        for _k in range(n_classifiers):
            clf = ImplicitClassifier(rng.standard_normal((num_classes, dim)))
            rep = verify_prop2(clf, rng.standard_normal(dim), int(rng.integers(num_classes)), g, tolerance)
            worst_analytic = max(worst_analytic, rep.analytic_error)
            worst_fd = max(worst_fd, rep.fd_error)
            passed &= rep.passed
    return {
        "passed": bool(passed),
        "max_analytic_error": worst_analytic,
        "max_fd_error": worst_fd,
        "tolerance": tolerance,
        "fd_tolerance": 1e-6,
        "gammas": list(gammas),
        "n_classifiers": n_classifiers,
    }


def explicit_marginal(schedule: LabelSchedule, t: int) -> np.ndarray:
    """``Q_t Q_{t-1} ... Q_1`` by repeated matrix multiplication."""
    M = np.eye(schedule.num_classes + 1)
    for s in range(1, t + 1):
        M = transition_matrix(schedule, s) @ M
    return M


def random_schedules(n: int, seed: int, max_T: int = 16) -> list[LabelSchedule]:
    rng = rngmod.stream(seed, "verify.schedules")
    out = []
    for k in range(n):
        T = int(rng.integers(1, max_T + 1))
        C = int(rng.integers(1, 6))
        if k % 2 == 0:
            products = 1.0 + rng.exponential(50.0, size=C)
            out.append(build_label_schedule(products, T, float(rng.uniform(0.1, 3.0)), uniform_classes={0}))
        else:
            out.append(LabelSchedule.from_betas(rng.uniform(0.0, 0.6, size=(T, C))))
    return out


def check_marginal(n_schedules: int = 20, max_T: int = 16, tolerance: float = 1e-12, seed: int = 0, **_) -> dict:
    worst = 0.0
    for sched in random_schedules(n_schedules, seed, max_T):
        for t in range(1, sched.T + 1):
            worst = max(worst, float(np.abs(cumulative_marginal(sched, t) - explicit_marginal(sched, t)).max()))
    return {"passed": bool(worst < tolerance), "max_abs_error": worst, "tolerance": tolerance, "n_schedules": n_schedules}


def exact_trajectory_law(betas_per_cell: np.ndarray) -> np.ndarray:
    """Joint law of first-mask times of independent absorbing chains.

    ``betas_per_cell`` has shape ``(T, K)``. Outcome ``sum_k (m_k - 1) * (T+1)**k``
    with ``m_k in 1..T+1`` (``T+1`` = never masked).
    """
    T, K = betas_per_cell.shape
    laws = []
    for k in range(K):
        b = betas_per_cell[:, k]
        survive = np.concatenate([[1.0], np.cumprod(1.0 - b)])
        laws.append(np.append(survive[:-1] * b, survive[-1]))
    joint = np.ones(1)
    for law in laws:
        joint = np.outer(law, joint).ravel()
    return joint


def _encode(mask_times: np.ndarray, T: int) -> np.ndarray:
    base = (T + 1) ** np.arange(mask_times.shape[1])
    return (mask_times - 1) @ base


def simulate_sequential_chain(
    classes: np.ndarray, schedule: LabelSchedule, n: int, rng: np.random.Generator
) -> np.ndarray:
    """First-mask times from step-by-step absorbing transitions, shape ``(n, K)``."""
    beta = step_betas(schedule)[:, classes]
    K = len(classes)
    mt = np.full((n, K), schedule.T + 1, dtype=np.int64)
    alive = np.ones((n, K), dtype=bool)
    for t in range(1, schedule.T + 1):
        hit = alive & (rng.random((n, K)) < beta[t - 1])
        mt[hit] = t
        alive &= ~hit
    return mt


def check_trajectory(
    n_trials: int = 1_000_000, n_marginal: int = 100_000, tv_tolerance: float = 0.01,
    products=REFERENCE_PRODUCTS, seed: int = 0, **_,
) -> dict:
    T = 4
    sched = build_label_schedule(np.asarray(products, dtype=float), T, 1.0)
    y0 = np.array([[0, 1], [1, 0]])
    classes = y0.ravel()
    K = classes.size
    exact = exact_trajectory_law(step_betas(sched)[:, classes])

    # mask-time matrix route: each trial is one row of a tiled (n, 4) map
    rng = rngmod.stream(seed, "verify.trajectory.U")
    tiled = SemanticMap(np.tile(classes, (n_trials, 1)), 2)
    U = mask_times_from_uniforms(tiled, sched, rng.random(tiled.shape))
    emp_u = np.bincount(_encode(U.mask_time, T), minlength=exact.size) / n_trials

    rng_s = rngmod.stream(seed, "verify.trajectory.chain")
    seq = simulate_sequential_chain(classes, sched, n_trials, rng_s)
    emp_s = np.bincount(_encode(seq, T), minlength=exact.size) / n_trials

    tv_u = 0.5 * float(np.abs(emp_u - exact).sum())
    tv_s = 0.5 * float(np.abs(emp_s - exact).sum())
    tv_us = 0.5 * float(np.abs(emp_u - emp_s).sum())

    # nestedness of reconstructed masked sets
    nested = bool(np.all(np.diff((U.mask_time[:, :, None] <= np.arange(1, T + 1)), axis=2) >= 0))

    # single-time marginals against gamma
    rng_m = rngmod.stream(seed, "verify.trajectory.marginal")
    tiled_m = SemanticMap(np.tile(classes, (n_marginal, 1)), 2)
    Um = mask_times_from_uniforms(tiled_m, sched, rng_m.random(tiled_m.shape))
    worst_z = 0.0
    for t in range(1, T + 1):
        for c in (0, 1):
            g = sched.gamma[t - 1, c]
            cols = classes == c
            hits = (Um.mask_time[:, cols] <= t).mean()
            n = n_marginal * cols.sum()
            sd = np.sqrt(max(g * (1 - g), 1e-300) / n)
            z = 0.0 if g in (0.0, 1.0) and hits == g else abs(hits - g) / sd
            worst_z = max(worst_z, float(z))
    return {
        "passed": bool(tv_u < tv_tolerance and tv_s < tv_tolerance and nested and worst_z <= 4.0),
        "tv_mask_time_vs_exact_chain": tv_u,
        "tv_simulated_chain_vs_exact_chain": tv_s,
        "tv_mask_time_vs_simulated_chain": tv_us,
        "tv_tolerance": tv_tolerance,
        "nested": nested,
        "max_marginal_z": worst_z,
        "n_trials": n_trials,
        "n_marginal": n_marginal,
        "outcomes": int(exact.size),
    }


def quadrature_posterior_mean(spec: ToyDataSpec, ab: float, x_t: float, label: int | None) -> float:
    """``E[x0 | x_t, y]`` for a single-channel pixel by adaptive quadrature."""
    m = spec.class_means[:, 0]
    s0 = spec.sigma0
    classes = range(spec.num_classes) if label is None else [label]
    prior = spec.class_prior if label is None else np.ones(spec.num_classes)
    noise_var = 1.0 - ab

    def density(x0: float) -> float:
        lik = np.exp(-((x_t - np.sqrt(ab) * x0) ** 2) / (2 * noise_var))
        pri = sum(prior[c] * np.exp(-((x0 - m[c]) ** 2) / (2 * s0**2)) for c in classes)
        return lik * pri

    lo = min(m) - 12 * s0
    hi = max(m) + 12 * s0
    pts = list(m) + [x_t / np.sqrt(ab)]
    pts = [p for p in pts if lo < p < hi]
    opts = dict(epsabs=0.0, epsrel=1e-13, limit=400, points=pts)
    with warnings.catch_warnings():
        # epsrel=1e-13 sits at the roundoff floor; quad still converges
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        num = integrate.quad(lambda v: v * density(v), lo, hi, **opts)[0]
        den = integrate.quad(density, lo, hi, **opts)[0]
    return num / den


def check_oracle(n_probes: int = 40, tolerance: float = 1e-6, mean_tolerance: float = 1e-8, seed: int = 0, **_) -> dict:
    rng = rngmod.stream(seed, "verify.oracle")
    spec = ToyDataSpec(np.array([[-0.6], [0.7]]), 0.3, np.array([0.5, 0.5]))
    img = build_image_schedule(50)
    oracle = OracleDenoiser(spec, img)
    worst_eps = worst_mean = 0.0
    for k in range(n_probes):
        t = int(rng.integers(1, img.T + 1)) if k else 25
        ab = img.ab(t)
        x_t = float(rng.normal(0, 1.2))
        label = None if k % 2 == 0 else int(rng.integers(2))
        cell = np.array([[spec.num_classes if label is None else label]])
        mean = oracle.posterior_mean_x0(np.array([[[x_t]]]), cell, t)[0, 0, 0]
        eps = oracle(np.array([[[x_t]]]), cell, t)[0][0, 0, 0]
        ref_mean = quadrature_posterior_mean(spec, ab, x_t, label)
        ref_eps = (x_t - np.sqrt(ab) * ref_mean) / np.sqrt(1 - ab)
        worst_mean = max(worst_mean, abs(mean - ref_mean))
        worst_eps = max(worst_eps, abs(eps - ref_eps))
    return {
        "passed": bool(worst_eps <= tolerance and worst_mean <= mean_tolerance),
        "max_eps_error": worst_eps,
        "max_mean_error": worst_mean,
        "tolerance": tolerance,
        "mean_tolerance": mean_tolerance,
        "n_probes": n_probes,
    }


def _toy_training_setup(seed: int, T: int = 20):
    from scdm.imagediff.toy import random_block_map

    rng = rngmod.stream(seed, "verify.gradcheck")
    spec = ToyDataSpec(np.array([[-0.6, 0.2], [0.7, -0.3], [0.1, 0.8]]), 0.2, np.ones(3) / 3)
    img = build_image_schedule(T)
    lab = build_label_schedule(np.array([3.0, 17.3, 651.3]), T, 1.0)
    maps = [random_block_map((4, 4), 3, rng) for _ in range(4)]
    y0 = np.stack([m.cells.astype(np.int64) for m in maps])
    x0 = np.stack([spec.sample_x0(m, rng) for m in maps])
    return rng, spec, img, lab, y0, x0


def check_gradcheck(
    h: float = 1e-4, rel_tolerance: float = 1e-3, n_vlb_steps: int = 1000, seed: int = 0, **_
) -> dict:
    rng, spec, img, lab, y0, x0 = _toy_training_setup(seed)
    net = MLPDenoiser.init(3, 2, img.T, rng, hidden=16)
    batch = prepare_batch(x0, y0, lab, img, 0.2, rng)

    def l_simple() -> float:
        return model_loss(net, x0, batch, img, 0.0)[0]

    _, _, grads = model_loss(net, x0, batch, img, 0.0)
    probes = [("w1", (1, 3)), ("embed", (1, 2))]
    rel_errors = []
    for name, ix in probes:
        p = net.params[name]
        old = p[ix]
        p[ix] = old + h
        up = l_simple()
        p[ix] = old - h
        down = l_simple()
        p[ix] = old
        fd = (up - down) / (2 * h)
        an = grads[name][ix]
        rel_errors.append(abs(fd - an) / max(abs(fd), abs(an), 1e-12))

    # L_vlb >= 0 over random steps and random network outputs
    vlb_min = np.inf
    for _k in range(n_vlb_steps):
        b = prepare_batch(x0[:1], y0[:1], lab, img, 0.2, rng)
        eps_pred = b["eps"] + rng.normal(0, 0.5, b["eps"].shape)
        var_logit = rng.uniform(-1.5, 1.5, b["eps"].shape)
        _, l_vlb, _, _ = hybrid_terms(x0[:1], b["x_t"], b["eps"], eps_pred, var_logit, b["t"], img)
        vlb_min = min(vlb_min, l_vlb)

    # oracle fed its own generating eps: sigma0 = 0 and unmasked labels
    spec0 = ToyDataSpec(spec.class_means, 0.0, spec.class_prior)
    oracle = OracleDenoiser(spec0, img)
    no_diff = build_label_schedule(np.array([3.0, 17.3, 651.3]), img.T, "inf")
    x0c = np.stack([spec0.mean_image(y) for y in y0])
    b = prepare_batch(x0c, y0, no_diff, img, 0.0, rng)
    eps_o = np.stack([oracle(b["x_t"][i], b["y_t"][i], int(b["t"][i]))[0] for i in range(len(y0))])
    l_simple_oracle = float(np.mean((eps_o - b["eps"]) ** 2))

    return {
        "passed": bool(max(rel_errors) <= rel_tolerance and vlb_min >= 0.0 and l_simple_oracle <= 1e-20),
        "probe_rel_errors": rel_errors,
        "rel_tolerance": rel_tolerance,
        "h": h,
        "min_l_vlb": float(vlb_min),
        "n_vlb_steps": n_vlb_steps,
        "l_simple_oracle": l_simple_oracle,
    }


CHECKS: dict[str, Callable[..., dict]] = {
    "prop1": check_prop1,
    "prop2": check_prop2,
    "marginal": check_marginal,
    "trajectory": check_trajectory,
    "oracle": check_oracle,
    "gradcheck": check_gradcheck,
}


def run_checks(targets, **options) -> dict:
    """Run the named checks; ``options`` are forwarded to each check."""
    targets = list(targets)
    if not targets:
        raise ValueError("no verification targets given")
    unknown = [t for t in targets if t not in CHECKS]
    if unknown:
        raise ValueError(f"unknown verification targets {unknown}; choose from {list(TARGETS)}")
    results = {}
    for name in targets:
        start = time.perf_counter()
        rep = CHECKS[name](**options)
        rep["seconds"] = time.perf_counter() - start
        results[name] = rep
    return {"passed": all(r["passed"] for r in results.values()), "checks": results}
