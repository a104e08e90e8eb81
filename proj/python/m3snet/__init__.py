"""Mountain-shaped multi-scale image restoration network."""

from ._core import (
    ConfigError,
    DimensionError,
    Model,
    ModelConfig,
    count_params,
    error_reduction,
    estimate_macs,
    psnr,
    ssim,
    synthesize_pairs,
)

__all__ = [
    "ConfigError",
    "DimensionError",
    "Model",
    "ModelConfig",
    "count_params",
    "error_reduction",
    "estimate_macs",
    "psnr",
    "ssim",
    "synthesize_pairs",
]
