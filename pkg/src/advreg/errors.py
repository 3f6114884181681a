"""Exception hierarchy shared by every module."""


class AdvRegError(ValueError):
    """Base class for all input/contract errors raised by advreg."""


class NotSymmetric(AdvRegError):
    pass


class NotPositiveDefinite(AdvRegError):
    pass


class DimensionMismatch(AdvRegError):
    pass


class Singular(AdvRegError):
    pass


class SingularTransform(Singular):
    pass


class DimensionTooLarge(AdvRegError):
    pass


class WrongNorm(AdvRegError):
    pass


class ZeroModel(AdvRegError):
    pass


class EmptyGrid(AdvRegError):
    pass


class NotPerfectSquare(AdvRegError):
    pass


class InvalidSubgradient(AdvRegError):
    pass


class UnsupportedNorm(AdvRegError):
    pass


class StepsizeViolation(AdvRegError):
    pass


class NonPositiveLambda(AdvRegError):
    pass


class OrderingViolation(AdvRegError):
    pass


class RankDeficient(AdvRegError):
    pass


class NoOracle(AdvRegError):
    pass


class ConfigError(AdvRegError):
    pass
