"""Exception hierarchy shared across the package."""


class TriStreamError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(TriStreamError):
    """Tensor shapes are inconsistent with the requested operation."""


class NumericError(TriStreamError):
    """A non-finite value (NaN/Inf) was detected with debug checks enabled."""


class LabelError(TriStreamError):
    """A class label is outside the valid range."""


class ConfigError(TriStreamError):
    """An architecture or training configuration is invalid."""


class StateError(TriStreamError):
    """An operation was applied in an invalid model/optimizer state."""


class FormatError(TriStreamError):
    """A checkpoint, slide directory, or manifest file is malformed."""


class DegenerateHistogram(TriStreamError):
    """Otsu thresholding was asked to split a constant image."""


class EmptyMaskError(TriStreamError):
    """Tissue masking produced no usable foreground."""


class BoundsError(TriStreamError):
    """A coordinate or tile rectangle falls outside the slide extents."""


class SamplingExhausted(TriStreamError):
    """Rejection sampling ran out of attempts for a tile draw."""


class SpecError(TriStreamError):
    """A synthetic slide specification is inconsistent."""


class SplitError(TriStreamError):
    """A dataset split request cannot be satisfied."""


class EmptyEvaluation(TriStreamError):
    """Evaluation was requested on an empty tile set."""


class IoError(TriStreamError):
    """An output path could not be written."""
