"""SNR-independent deep joint source-channel coding for wireless image transmission."""

from sijscc.model_blocks import ESA, GDN, IRAB, ACmix
from sijscc.snr_conditioning import AFModule
from sijscc.channel import ChannelSpec, snr_to_sigma2, transmit, transmit_awgn, transmit_fading

from sijscc.codec import (
    SIJSCC,
    ModelConfig,
    build_model,
    complex_to_real,
    power_normalize,
    real_to_complex,
)
from sijscc.errors import (
    CheckpointError,
    ConfigurationError,
    ContractViolation,
    DegenerateInputError,
    IngestionError,
    ShapeError,
    TrainingDiverged,
)

__version__ = "0.1.0"

__all__ = [
    "ACmix",
    "ChannelSpec",
    "snr_to_sigma2",
    "transmit",
    "transmit_awgn",
    "transmit_fading",
    "AFModule",
    "ESA",
    "GDN",
    "IRAB",
    "SIJSCC",
    "ModelConfig",
    "build_model",
    "complex_to_real",
    "power_normalize",
    "real_to_complex",
    "CheckpointError",
    "ConfigurationError",
    "ContractViolation",
    "DegenerateInputError",
    "IngestionError",
    "ShapeError",
    "TrainingDiverged",
]
