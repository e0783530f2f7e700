import numpy as np
import pytest

from scdm.ablation import (
    METHODS,
    MODES,
    AblationConfig,
    build_toy,
    corrupt_maps,
    nearest_mean_segmentation,
    run_ablation,
)


@pytest.fixture(scope="module")
def small():
    cfg = AblationConfig(T=20, step_counts=(5, 10, 20), size=8, n_corpus=20, n_pairs=8)
    return cfg, run_ablation(cfg)


def test_row_counts(small):
    cfg, res = small
    assert len(res["ablation_rows"]) == len(METHODS) * len(cfg.step_counts)
    assert len(res["robustness_rows"]) == len(MODES) * len(METHODS) * len(cfg.step_counts)


def test_identities(small):
    _, res = small
    ident = res["identity"]
    assert ident["base_equals_fixed_label_sampler"]
    assert ident["extrapolation_w0_equals_label_diffusion"]
    assert ident["extrapolation_w_changes_output"]


def test_rows_finite(small):
    _, res = small
    for row in res["ablation_rows"] + res["robustness_rows"]:
        for k in ("mse", "psnr", "ssim", "frechet", "miou"):
            assert np.isfinite(row[k])


def test_corruptions_are_seeded():
    cfg = AblationConfig(T=10, step_counts=(10,), size=8, n_corpus=5, n_pairs=4)
    toy = build_toy(cfg)
    assert corrupt_maps(toy.maps, cfg, "random") == corrupt_maps(toy.maps, cfg, "random")


def test_nearest_mean_segmentation():
    cfg = AblationConfig(T=10, step_counts=(10,), n_pairs=2)
    toy = build_toy(cfg)
    means = toy.spec.class_means
    assert nearest_mean_segmentation(means[None], toy.spec).tolist() == [list(range(len(means)))]


def test_config_json_roundtrip():
    cfg = AblationConfig(T=30, step_counts=(5, 30))
    assert AblationConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ValueError):
        AblationConfig(T=10, step_counts=(25,))
