"""Two-stage fMRI-to-text semantic decoding at desk scale."""

from fmri2text.numerics import DegenerateInputError, ValidationError

__version__ = "0.1.0"

__all__ = ["DegenerateInputError", "ValidationError", "__version__"]
