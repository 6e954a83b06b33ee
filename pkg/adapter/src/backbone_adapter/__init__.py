"""Bridge from image backbones to the prediction-file contract."""

from .adapter import (
    AdapterConfig,
    AdapterError,
    emit_predictions,
    read_image_manifest,
    stub_probabilities,
)

__version__ = "0.1.0"

__all__ = [
    "AdapterConfig",
    "AdapterError",
    "emit_predictions",
    "read_image_manifest",
    "stub_probabilities",
]
