"""Chromaticity/brightness color image denoising with a G-norm fidelity, and
numerical tools for the relaxed energy densities of the model."""

__version__ = "0.1.0"

from .energy import DensityQuery, EdgeStop, EnergyBreakdown  # noqa: E402
from .errors import (ChromaBVError, DimensionError, ImageFormatError, NonConvergence,  # noqa: E402
                     NonZeroMean, PreconditionError, ZeroBrightness)
from .fields import (BrightnessField, ChromaticityField, ColorImage, decompose,  # noqa: E402
                     recompose)
from .gnorm import GNormConfig, gnorm  # noqa: E402

__all__ = ["DensityQuery", "EdgeStop", "EnergyBreakdown", "ChromaBVError", "DimensionError",
           "ImageFormatError", "NonConvergence", "NonZeroMean", "PreconditionError", "ZeroBrightness",
           "BrightnessField", "ChromaticityField", "ColorImage", "decompose", "recompose",
           "GNormConfig", "gnorm", "__version__"]
