"""Generative-model feature distillation for convolutional backbones."""

from gendistill.errors import CacheFormatError, ConfigError, ShapeError
from gendistill.pyramid import FeaturePyramid

__all__ = ["CacheFormatError", "ConfigError", "FeaturePyramid", "ShapeError"]
__version__ = "0.1.0"
