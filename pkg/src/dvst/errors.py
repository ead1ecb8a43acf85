"""Exception types raised across the package."""


class DvstError(Exception):
    """Base class for all package errors."""


class NoFrames(DvstError):
    """A frame directory contained no readable images."""


class ShapeMismatch(DvstError):
    """Two grids that must share a shape do not."""


class InvalidGopSize(DvstError):
    """GOP size below 1."""


class FrameTooSmall(DvstError):
    """Frame too small for even a single MS-SSIM scale."""


class ZeroPower(DvstError):
    """Power normalization of an all-zero stream."""


class OddLengthStream(DvstError):
    """Rayleigh transmission needs an even number of real symbols."""


class InvalidEta(DvstError):
    """Entropy-to-symbol scaling factor must be positive."""


class UnknownRate(DvstError):
    """A per-embedding symbol count is not in the active value set."""


class CorruptStream(DvstError):
    """Stream length inconsistent with its segment lengths."""


class StateNotInitialized(DvstError):
    """P-frame transmission attempted before an I-frame."""


class ScheduleError(DvstError):
    """Training stages requested out of order."""


class CbrUnreachable(DvstError):
    """Bandwidth target outside what the value sets can deliver."""


class NoOverlap(DvstError):
    """Rate-distortion curves share no quality range."""
