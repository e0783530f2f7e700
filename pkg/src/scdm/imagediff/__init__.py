"""Continuous image diffusion: toy data, denoisers, training and sampling."""

from scdm.imagediff.denoisers import Denoiser, MLPDenoiser, OracleDenoiser, load_denoiser
from scdm.imagediff.sampler import (
    SamplerConfig,
    dynamic_threshold,
    respace,
    reverse_step,
    sample,
    sample_batch,
    sample_fixed_label,
)
from scdm.imagediff.toy import (
    ToyDataSpec,
    decode_image,
    encode_image,
    forward_noise,
    load_image,
    random_block_map,
    save_image,
)
from scdm.imagediff.training import LossReport, hybrid_terms, model_loss, prepare_batch, train_step

__all__ = [
    "Denoiser",
    "LossReport",
    "MLPDenoiser",
    "OracleDenoiser",
    "SamplerConfig",
    "ToyDataSpec",
    "decode_image",
    "dynamic_threshold",
    "encode_image",
    "forward_noise",
    "hybrid_terms",
    "load_denoiser",
    "load_image",
    "model_loss",
    "prepare_batch",
    "random_block_map",
    "respace",
    "reverse_step",
    "sample",
    "sample_batch",
    "sample_fixed_label",
    "save_image",
    "train_step",
]
