"""Python bindings for the MUSE speech enhancement core."""

from ._core import (
    ConfigError,
    FormatError,
    ModelConfig,
    NumericError,
    ShapeError,
    complexity,
    enhance,
    gradcheck,
    istft,
    param_breakdown,
    parse_model_config,
    read_wav,
    si_sdr,
    softmax_attention,
    ssnr,
    stft,
    taylor_attention,
    write_wav,
)

__all__ = [
    "ConfigError",
    "FormatError",
    "ModelConfig",
    "NumericError",
    "ShapeError",
    "complexity",
    "enhance",
    "gradcheck",
    "istft",
    "param_breakdown",
    "parse_model_config",
    "read_wav",
    "si_sdr",
    "softmax_attention",
    "ssnr",
    "stft",
    "taylor_attention",
    "write_wav",
]
