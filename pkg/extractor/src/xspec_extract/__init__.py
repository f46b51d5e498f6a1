"""Image-folder to XSFT feature extraction with a truncated VGG16 backbone."""

from .backbone import OUT_CHANNELS, build_backbone, grid_shape
from .errors import (
    ExtractorError,
    InvalidConfigError,
    NoImagesFound,
    UnreadableImage,
    WeightsMissing,
)
from .extract import ExtractConfig, discover_images, extract, load_image

__all__ = [
    "OUT_CHANNELS",
    "build_backbone",
    "grid_shape",
    "ExtractorError",
    "InvalidConfigError",
    "NoImagesFound",
    "UnreadableImage",
    "WeightsMissing",
    "ExtractConfig",
    "discover_images",
    "extract",
    "load_image",
]
