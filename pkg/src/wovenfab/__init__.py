"""Woven fabric appearance model with forward rendering and parameter recovery."""
from .errors import ConfigError, EstimationError, FitError, GrazingError, ParameterError
from .fabric import BsdfValue, FabricParams, eval_bsdf, sample_params
from .render import CaptureScene, Renderer, render_pair
from .weave import WeavePattern, YarnParams, eval_surface, pattern_grid

__version__ = "0.1.0"

__all__ = [
    "BsdfValue", "CaptureScene", "ConfigError", "EstimationError", "FabricParams", "FitError",
    "GrazingError", "ParameterError", "Renderer", "WeavePattern", "YarnParams", "eval_bsdf",
    "eval_surface", "pattern_grid", "render_pair", "sample_params",
]
