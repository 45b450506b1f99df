"""Exception hierarchy.

Every error raised deliberately by the package derives from
:class:`GradNormError` and carries a short ``category`` string that the
command line maps to an exit code.
"""


class GradNormError(Exception):
    category = "error"


class ImageFormatError(GradNormError):
    """File is unreadable, in an unsupported format, or has zero size."""

    category = "io"


class SchemaError(GradNormError):
    """A model or samples file does not match the expected layout."""

    category = "io"


class DegenerateDataError(GradNormError):
    """Data carries no usable gradient signal (e.g. constant images)."""

    category = "numerical"


class IdentifiabilityError(DegenerateDataError):
    """Not enough distinct scales, or a singular fitting system."""

    category = "numerical"
