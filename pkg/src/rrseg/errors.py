"""Exception taxonomy shared across the package."""


class RRSegError(Exception):
    """Base class for all rrseg errors."""


# volume / IO
class AllZeroChannel(RRSegError):
    pass


class ConstantChannel(RRSegError):
    pass


class CropTooLarge(RRSegError):
    pass


class UnknownLabel(RRSegError):
    pass


class IoError(RRSegError):
    pass


class BadMagic(IoError):
    pass


class UnsupportedVersion(IoError):
    pass


class TruncatedFile(IoError):
    pass


# autodiff / losses
class ShapeMismatch(RRSegError):
    pass


class NonScalarLoss(RRSegError):
    pass


class DegenerateColumn(RRSegError):
    pass


# network
class InvalidConfig(RRSegError):
    pass


class IndivisibleShape(RRSegError):
    pass


class TooFewRegions(RRSegError):
    pass


# trainer / metrics
class TooFewCases(RRSegError):
    pass


class MissingCase(RRSegError):
    pass


class NonFiniteLoss(RRSegError):
    pass
