class TNRFError(Exception):
    """Base class for package errors."""


class ValidationError(TNRFError, ValueError):
    """Input violates a documented contract."""


class LoadError(TNRFError, OSError):
    """A file referenced by a dataset or checkpoint could not be read."""


class GenerationError(TNRFError):
    """Synthetic family parameters produce an ambiguous shape."""


class DomainError(TNRFError, ValueError):
    """Point lies outside the domain of a correspondence oracle."""


class NonFiniteError(TNRFError, ArithmeticError):
    """A loss term or gradient became NaN or infinite."""


class ChecksumError(TNRFError):
    """Checkpoint payload does not match its recorded checksum."""


class VersionError(TNRFError):
    """Checkpoint was written by an incompatible format version."""


class BackgroundPixelError(TNRFError, ValueError):
    """Pixel is not covered by the object at the current render settings."""
