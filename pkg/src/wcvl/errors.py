"""Exception hierarchy shared by every module of the package."""


class WcvlError(Exception):
    """Base class for all package errors."""


# numerics
class NormTooSmall(WcvlError, ValueError):
    pass


class DimMismatch(WcvlError, ValueError):
    pass


class NonFiniteEvaluation(WcvlError, ArithmeticError):
    pass


# data
class InvalidConfig(WcvlError, ValueError):
    pass


class NotEnoughIdentities(WcvlError, ValueError):
    pass


class IdentityTooSmall(WcvlError, ValueError):
    pass


class FormatVersionMismatch(WcvlError):
    pass


class CorruptRecord(WcvlError):
    pass


# model
class InvalidArch(WcvlError, ValueError):
    pass


class ShapeMismatch(WcvlError, ValueError):
    pass


class ArchMismatch(WcvlError):
    pass


# losses
class LabelOutOfRange(WcvlError, ValueError):
    pass


class NoPositive(WcvlError, ValueError):
    pass


class NoNegative(WcvlError, ValueError):
    pass


# trainer
class EpochOutOfRange(WcvlError, ValueError):
    pass


class StageMismatch(WcvlError):
    pass


# eval
class LabelAbsentFromGallery(WcvlError, ValueError):
    pass


class DegenerateWithinScatter(WcvlError, ValueError):
    pass


class SingleClass(WcvlError, ValueError):
    pass
