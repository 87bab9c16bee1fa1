"""Exception hierarchy shared by every module.

All domain failures derive from :class:`MetaEarError` so the command line can
map them onto a single "configuration/domain error" exit code.
"""


class MetaEarError(ValueError):
    """Base class for domain and configuration errors."""


class OutOfDomain(MetaEarError):
    pass


class NonProportional(MetaEarError):
    pass


class UnknownSpec(MetaEarError):
    pass


class NonPositiveInput(MetaEarError):
    pass


class InvalidGeometry(MetaEarError):
    pass


class InvalidCurve(MetaEarError):
    pass


class JumpOutsideGrid(MetaEarError):
    pass


class GridTooNarrow(MetaEarError):
    pass


class DisjointBands(MetaEarError):
    pass


class Uncoverable(MetaEarError):
    def __init__(self, frontier: float):
        super().__init__(f"cannot cover beyond {frontier:g} Hz")
        self.frontier = frontier


class RateMismatch(MetaEarError):
    pass


class EmptyBand(MetaEarError):
    pass


class TooShort(MetaEarError):
    pass


class PlanChannelMismatch(MetaEarError):
    pass


class MissingCurve(MetaEarError):
    pass


class AllIsolated(MetaEarError):
    pass


class LengthMismatch(MetaEarError):
    pass


class ZeroReference(MetaEarError):
    pass


class EmptyList(MetaEarError):
    pass


class EmptyGrid(MetaEarError):
    pass


class NyquistViolation(MetaEarError):
    pass


class UnsupportedFormat(MetaEarError):
    pass


class CorruptWav(MetaEarError):
    pass


class ConfigError(MetaEarError):
    pass
