"""Exception types shared across the package.

Each maps to a distinct failure mode of the public API; the CLI translates
them to exit codes (see cli.py).
"""


class XspecError(Exception):
    """Base class for all package errors."""


class MalformedFileError(XspecError):
    """Feature file or manifest failed structural validation."""


class ShapeMismatchError(XspecError):
    """Array shape disagrees with the declared or expected geometry."""


class DuplicateIdError(XspecError):
    """Two samples in one dataset share a sample_id."""


class StoreIoError(XspecError):
    """Filesystem-level read/write failure."""


class InvalidConfigError(XspecError):
    """Configuration value out of range or inconsistent."""


class InvalidParamsError(XspecError):
    """Model or clustering parameters fail validation."""


class EmptyClusterError(XspecError):
    """Operation on a cluster with no members."""


class SingleClusterError(XspecError):
    """Silhouette requires at least two clusters."""


class BadLabelError(XspecError):
    """Label index outside the valid range."""


class DomainMismatchError(XspecError):
    """Sample from the wrong spectral domain for this argument slot."""


class DimMismatchError(XspecError):
    """Descriptor dimensionality disagreement."""


class NoNegativeAvailableError(XspecError):
    """Triplet mining needs at least two source-domain clusters."""


class LabelMissingError(XspecError):
    """Ranking metrics need every probe label present in the gallery."""


class EmptyInputError(XspecError):
    """Metric invoked on an empty score list."""


class WeightsMissingError(XspecError):
    """Pretrained backbone weights not found."""
