"""Exception types raised across the package."""


class MixedImputeError(Exception):
    """Base class for all package errors."""


# data
class UnknownVariable(MixedImputeError, KeyError):
    pass


class LevelNotObserved(MixedImputeError, ValueError):
    pass


class ParseError(MixedImputeError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateOccasion(ParseError):
    pass


class RaggedRow(ParseError):
    pass


# models
class DimensionMismatch(MixedImputeError, ValueError):
    pass


class NonFiniteVariance(MixedImputeError, FloatingPointError):
    pass


class DomainError(MixedImputeError, ValueError):
    pass


# inference
class SingularHessian(MixedImputeError, ArithmeticError):
    pass


class NonConvergence(MixedImputeError, RuntimeError):
    pass


class DivergedChain(MixedImputeError, RuntimeError):
    pass


class NonFiniteTarget(MixedImputeError, FloatingPointError):
    pass


class InsufficientDraws(MixedImputeError, ValueError):
    pass


# imputation
class NoMissingCells(MixedImputeError, UserWarning):
    pass


class MissingCovariateInMeanModel(MixedImputeError, ValueError):
    pass


class CyclicDependency(MixedImputeError, ValueError):
    pass


class NonAscendingCutoffs(MixedImputeError, ValueError):
    pass


# simulation / evaluation
class InvalidConfig(MixedImputeError, ValueError):
    pass


class NoBracket(MixedImputeError, RuntimeError):
    pass


class EmptyMask(MixedImputeError, ValueError):
    pass


class MissingInterval(MixedImputeError, ValueError):
    pass
