"""Grad-CAM, Grad-CAM+ and Grad-CAM++ on a small numpy CNN."""

from .cam import AttributionRequest, RawHeatmap, attribute
from .nn import Model, ScoreSpec, forward, generate_toy_model, load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "AttributionRequest",
    "Model",
    "RawHeatmap",
    "ScoreSpec",
    "attribute",
    "forward",
    "generate_toy_model",
    "load_model",
    "save_model",
]
