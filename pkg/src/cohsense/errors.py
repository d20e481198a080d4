"""Exception hierarchy shared by all cohsense modules."""


class CohsenseError(Exception):
    """Base class for every error raised by the package."""


class ConfigError(CohsenseError, ValueError):
    """Invalid configuration value or schema violation."""


class SingularMatrix(CohsenseError, ArithmeticError):
    """Jones matrix too close to singular for polar decomposition."""


class ZeroPower(CohsenseError, ArithmeticError):
    """Field vector carries no power; Stokes normalization impossible."""


class NotUnitary(CohsenseError, ValueError):
    """Matrix fails the unitarity check; polar-decompose it first."""


class DegenerateBlock(CohsenseError, ArithmeticError):
    """CPE block second-moment matrix is (near) isotropic."""


class Overflow(CohsenseError):
    """Bridge buffer full; the newest snapshot window was dropped."""


class StreamError(CohsenseError):
    """Malformed snapshot record or stream file."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BadMagic(StreamError):
    pass


class BadCrc(StreamError):
    pass


class UnsupportedVersion(StreamError):
    pass


class TruncatedRecord(StreamError):
    pass


class TooShort(CohsenseError, ValueError):
    """Series shorter than one spectrogram segment."""


class NoRidge(CohsenseError):
    """No spectral ridge with sufficient prominence inside the band."""


class AlignmentError(CohsenseError, ValueError):
    """Series sampled on different time grids."""
