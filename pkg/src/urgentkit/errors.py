"""Exception hierarchy shared across the package."""


class UrgentKitError(Exception):
    """Base class for all package errors."""


class MalformedContainer(UrgentKitError):
    pass


class UnsupportedEncoding(UrgentKitError):
    pass


class EmptyPayload(UrgentKitError):
    pass


class IoFailure(UrgentKitError):
    pass


class DegenerateOverlap(UrgentKitError):
    pass


class InvalidBand(UrgentKitError):
    pass


class InvalidCutoff(UrgentKitError):
    pass


class ZeroReference(UrgentKitError):
    pass


class LengthMismatch(UrgentKitError):
    pass


class RateMismatch(UrgentKitError):
    pass


class ZeroVector(UrgentKitError):
    pass


class ShapeMismatch(UrgentKitError):
    pass


class ZeroNoise(UrgentKitError):
    pass


class MissingResource(UrgentKitError):
    pass


class InvalidNoiseWindow(UrgentKitError):
    pass


class InsufficientData(UrgentKitError):
    pass


class FrameAlignmentFailure(UrgentKitError):
    pass


class EmptyMask(UrgentKitError):
    pass


class HashMismatch(UrgentKitError):
    pass


class ConfigError(UrgentKitError):
    pass
