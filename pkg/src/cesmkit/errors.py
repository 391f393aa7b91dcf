"""Exception types shared across the toolkit.

Everything derives from :class:`ToolkitError`, which the CLI maps to exit
code 1 (usage problems exit 2).
"""


class ToolkitError(Exception):
    """Base class for domain errors raised by the toolkit."""


class FilenameError(ToolkitError):
    """A study filename does not follow the P<id>_<side>_<energy>_<view> scheme."""


class ManifestError(ToolkitError):
    """Pair manifest construction failed (e.g. duplicate study keys)."""


class ImageFormatError(ToolkitError):
    """An image file could not be read or has an unsupported format."""


class RegistrationError(ToolkitError):
    """Registration failed or a similarity score is undefined."""


class MaskError(ToolkitError):
    """Foreground segmentation produced no usable mask."""


class SamplingError(ToolkitError):
    """Random crop sampling exhausted its attempt budget."""


class SplitInfeasibleError(ToolkitError):
    """Patient-level split could not get close to the target fractions.

    Carries the achieved per-set crop fractions so callers can report them.
    """

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class DivergenceError(ToolkitError):
    """A training loss became non-finite."""


class NumericError(ToolkitError):
    """A forward/backward pass produced non-finite intermediate values."""


class ModelFormatError(ToolkitError):
    """A serialized model file is corrupt or has the wrong format."""
