"""Extractor error hierarchy."""


class ExtractorError(Exception):
    """Base class for everything this package raises on purpose."""


class InvalidConfigError(ExtractorError):
    pass


class UnreadableImage(ExtractorError):
    """An input file could not be decoded as an image."""


class WeightsMissing(ExtractorError):
    """A weights file was requested but could not be loaded or did not fit."""


class NoImagesFound(ExtractorError):
    """The input directory contains no image files."""
