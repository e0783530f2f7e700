"""Desk-scale ablation and noisy-label robustness harness.

Three sampler variants are compared with the oracle denoiser on a toy
class-conditional Gaussian image model:

- ``base``: fixed labels (``eta = inf``), no extrapolation
- ``label_diffusion``: class-wise schedule with ``eta = 1``
- ``extrapolation``: ``eta = 1`` plus extrapolation weight ``w``

The robustness study samples each clean map and its corrupted copy with the
same sample index, so both samples share every noise draw.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from scdm import rng as rngmod
from scdm.corrupt import CorruptionConfig, corrupt
from scdm.imagediff.denoisers import OracleDenoiser
from scdm.imagediff.sampler import SamplerConfig, sample_batch, sample_fixed_label
from scdm.imagediff.toy import ToyDataSpec, random_block_map
from scdm.labelmap import SemanticMap, estimate_stats, miou
from scdm.metrics import capped_psnr, frechet_gaussian, psnr, ssim
from scdm.schedule import build_image_schedule, build_label_schedule

METHODS = ("base", "label_diffusion", "extrapolation")
MODES = ("ds", "edge", "random")

DEFAULT_MEANS = ((0.0, 0.0, 0.0), (-0.7, 0.5, 0.2), (0.6, -0.4, 0.5), (0.3, 0.7, -0.6))
DEFAULT_PRIOR = (0.1, 0.3, 0.3, 0.3)

CSV_COLUMNS = (
    "section", "mode", "method", "steps", "eta", "w",
    "mse", "psnr", "ssim", "frechet", "miou", "n",
)


@dataclass(frozen=True)
class AblationConfig:
    """Everything the harness needs; echoed verbatim into its outputs."""

    seed: int = 2
    T: int = 100
    step_counts: tuple[int, ...] = (25, 50, 100)
    size: int = 16
    n_corpus: int = 100
    n_pairs: int = 100
    class_means: tuple = DEFAULT_MEANS
    class_prior: tuple = DEFAULT_PRIOR
    sigma0: float = 0.5
    unlabeled_class: int = 0
    cfg_scale: float = 0.5
    extrapolation: float = 0.8
    threshold_percentile: float = 0.95
    ds_factor: int = 4
    edge_distance: int = 2
    random_rate: float = 0.10
    image_kind: str = "linear_beta"
    image_params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "step_counts", tuple(int(s) for s in self.step_counts))
        object.__setattr__(self, "class_means", tuple(tuple(float(v) for v in r) for r in self.class_means))
        object.__setattr__(self, "class_prior", tuple(float(v) for v in self.class_prior))
        if any(s < 1 or s > self.T for s in self.step_counts):
            raise ValueError(f"step counts must lie in [1, T={self.T}]")
        if self.n_pairs < 2:
            raise ValueError("need at least two pairs")

    @property
    def num_classes(self) -> int:
        return len(self.class_means)

    def to_json(self) -> dict:
        out = asdict(self)
        out["step_counts"] = list(self.step_counts)
        out["class_means"] = [list(r) for r in self.class_means]
        out["class_prior"] = list(self.class_prior)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "AblationConfig":
        known = {k: v for k, v in obj.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class Toy:
    spec: ToyDataSpec
    corpus: list[SemanticMap]
    maps: list[SemanticMap]
    oracle: OracleDenoiser
    label_scheds: dict
    image_sched: object


def build_toy(cfg: AblationConfig) -> Toy:
    """Toy spec, statistics corpus, evaluation maps and schedules."""
    C = cfg.num_classes
    spec = ToyDataSpec(np.array(cfg.class_means), cfg.sigma0, np.array(cfg.class_prior))
    labeled = np.array([c for c in range(C) if c != cfg.unlabeled_class])
    shape = (cfg.size, cfg.size)
    corpus_rng = rngmod.stream(cfg.seed, "ablation.corpus")
    corpus = [random_block_map(shape, C, corpus_rng, classes=labeled) for _ in range(cfg.n_corpus)]
    eval_rng = rngmod.stream(cfg.seed, "ablation.maps")
    maps = [random_block_map(shape, C, eval_rng, classes=labeled) for _ in range(cfg.n_pairs)]
    stats = estimate_stats(corpus, clamp_phi=True, unlabeled_class=cfg.unlabeled_class)
    image = build_image_schedule(cfg.T, cfg.image_kind, **cfg.image_params)
    label = {
        "inf": build_label_schedule(stats, cfg.T, "inf"),
        1.0: build_label_schedule(stats, cfg.T, 1.0),
    }
    return Toy(spec, corpus, maps, OracleDenoiser(spec, image), label, image)


def method_settings(cfg: AblationConfig) -> dict[str, tuple]:
    """``method -> (eta, w)``."""
    return {"base": ("inf", 0.0), "label_diffusion": (1.0, 0.0), "extrapolation": (1.0, cfg.extrapolation)}


def sampler_config(cfg: AblationConfig, steps: int, w: float) -> SamplerConfig:
    return SamplerConfig(
        steps=steps,
        cfg_scale=cfg.cfg_scale,
        extrapolation=w,
        threshold_percentile=cfg.threshold_percentile,
        seed=cfg.seed,
    )


def run_method(toy: Toy, cfg: AblationConfig, method: str, steps: int, maps=None) -> np.ndarray:
    eta, w = method_settings(cfg)[method]
    maps = toy.maps if maps is None else maps
    return sample_batch(
        toy.oracle, maps, toy.label_scheds[eta], toy.image_sched, sampler_config(cfg, steps, w), toy.spec.channels
    )


def nearest_mean_segmentation(x: np.ndarray, spec: ToyDataSpec) -> np.ndarray:
    """Per-pixel argmin over class means; ``x`` is ``(..., CH)``."""
    d = ((x[..., None, :] - spec.class_means) ** 2).sum(-1)
    return d.argmin(-1)


def _seg_miou(x: np.ndarray, maps, spec: ToyDataSpec) -> float:
    seg = nearest_mean_segmentation(x, spec)
    C = spec.num_classes
    return float(np.mean([miou(SemanticMap(s, C), m) for s, m in zip(seg, maps)]))


def corrupt_maps(maps, cfg: AblationConfig, mode: str) -> list[SemanticMap]:
    ccfg = CorruptionConfig(
        mode=mode,
        unlabeled_class=cfg.unlabeled_class,
        ds_factor=cfg.ds_factor,
        edge_distance=cfg.edge_distance,
        random_rate=cfg.random_rate,
    )
    return [corrupt(m, ccfg, rngmod.stream(cfg.seed, "corrupt", i)) for i, m in enumerate(maps)]


def _pixels(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def _mean_psnr(a: np.ndarray, b: np.ndarray) -> float:
    # identical pairs are infinite; cap each before averaging
    return float(np.mean([capped_psnr(psnr(u, v)) for u, v in zip(a, b)]))


def ablation_rows(toy: Toy, cfg: AblationConfig, samples: dict) -> list[dict]:
    """Fidelity of each variant against the clean maps."""
    real = np.stack([toy.spec.sample_x0(m, rngmod.stream(cfg.seed, "ablation.real", i)) for i, m in enumerate(toy.maps)])
    means = np.stack([toy.spec.mean_image(m) for m in toy.maps])
    rows = []
    for steps in cfg.step_counts:
        for method in METHODS:
            x = samples[(method, steps)]
            eta, w = method_settings(cfg)[method]
            rows.append({
                "section": "ablation", "mode": "clean", "method": method, "steps": steps,
                "eta": eta, "w": w,
                "mse": float(np.mean((x - means) ** 2)),
                "psnr": _mean_psnr(x, means),
                "ssim": float(np.mean([ssim(a, b) for a, b in zip(x, real)])),
                "frechet": frechet_gaussian(_pixels(x), _pixels(real)),
                "miou": _seg_miou(x, toy.maps, toy.spec),
                "n": len(x),
            })
    return rows


def robustness_rows(toy: Toy, cfg: AblationConfig, samples: dict) -> list[dict]:
    """Paired clean-vs-corrupted distances for every mode, method and step count."""
    rows = []
    for mode in MODES:
        noisy_maps = corrupt_maps(toy.maps, cfg, mode)
        for steps in cfg.step_counts:
            for method in METHODS:
                clean = samples[(method, steps)]
                noisy = run_method(toy, cfg, method, steps, noisy_maps)
                eta, w = method_settings(cfg)[method]
                rows.append({
                    "section": "robustness", "mode": mode, "method": method, "steps": steps,
                    "eta": eta, "w": w,
                    "mse": float(np.mean((clean - noisy) ** 2)),
                    "psnr": _mean_psnr(clean, noisy),
                    "ssim": float(np.mean([ssim(a, b) for a, b in zip(clean, noisy)])),
                    "frechet": frechet_gaussian(_pixels(clean), _pixels(noisy)),
                    "miou": _seg_miou(noisy, toy.maps, toy.spec),
                    "n": len(clean),
                })
    return rows


def identity_checks(toy: Toy, cfg: AblationConfig, samples: dict) -> dict:
    """Bitwise checks tying the rows to each other at the smallest step count."""
    steps = min(cfg.step_counts)
    direct = sample_fixed_label(
        toy.oracle, toy.maps, toy.image_sched, sampler_config(cfg, steps, 0.0), toy.spec.channels
    )
    base_matches_direct = bool(np.array_equal(samples[("base", steps)], direct))
    zero_w = replace(cfg, extrapolation=0.0)
    w0 = run_method(toy, zero_w, "extrapolation", steps)
    w0_matches_ld = bool(np.array_equal(w0, samples[("label_diffusion", steps)]))
    w_changes = cfg.extrapolation == 0 or not np.array_equal(
        samples[("extrapolation", steps)], samples[("label_diffusion", steps)]
    )
    return {
        "steps": steps,
        "base_equals_fixed_label_sampler": base_matches_direct,
        "extrapolation_w0_equals_label_diffusion": w0_matches_ld,
        "extrapolation_w_changes_output": bool(w_changes),
        "passed": base_matches_direct and w0_matches_ld and bool(w_changes),
    }


def robustness_direction(rows: list[dict], steps: int | None = None) -> dict:
    """``label_diffusion`` vs ``base`` mean paired distance per mode."""
    out = {}
    for mode in MODES:
        sel = [r for r in rows if r["section"] == "robustness" and r["mode"] == mode
               and (steps is None or r["steps"] == steps)]
        by = {}
        for r in sel:
            by.setdefault(r["method"], []).append(r["mse"])
        ld, base = float(np.mean(by["label_diffusion"])), float(np.mean(by["base"]))
        out[mode] = {"label_diffusion": ld, "base": base, "label_diffusion_better": ld < base}
    return out


def run_ablation(cfg: AblationConfig) -> dict:
    """Run every row; returns ``{"rows": ..., "identity": ..., "direction": ...}``."""
    start = time.perf_counter()
    toy = build_toy(cfg)
    samples = {(m, s): run_method(toy, cfg, m, s) for s in cfg.step_counts for m in METHODS}
    abl = ablation_rows(toy, cfg, samples)
    rob = robustness_rows(toy, cfg, samples)
    return {
        "ablation_rows": abl,
        "robustness_rows": rob,
        "identity": identity_checks(toy, cfg, samples),
        "direction": {
            "all_steps": robustness_direction(rob),
            **{f"steps_{s}": robustness_direction(rob, s) for s in cfg.step_counts},
        },
        "seconds": time.perf_counter() - start,
    }
