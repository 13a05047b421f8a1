from .config import ModelConfig, VARIANTS
from .captioner import CaptionModel, SampleInput, compute_indicators, hybrid_distribution

__all__ = [
    "ModelConfig",
    "VARIANTS",
    "CaptionModel",
    "SampleInput",
    "compute_indicators",
    "hybrid_distribution",
]
