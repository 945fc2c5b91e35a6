"""Exception types shared across the package."""


class ImageFormatError(ValueError):
    """Base class for PGM/PPM decoding failures."""


class MalformedHeaderError(ImageFormatError):
    pass


class TruncatedPayloadError(ImageFormatError):
    pass


class ShapeMismatchError(ValueError):
    """Two tensors that must agree in shape do not."""


class ScanError(ValueError):
    """Laser scan file or sample is unusable."""


class CalibrationError(ValueError):
    """Camera-grid cell has no laser-band mapping."""


class InvariantError(RuntimeError):
    """An internal consistency check failed."""


class ModelFormatError(ValueError):
    """A model file is malformed or from an unknown format version."""
