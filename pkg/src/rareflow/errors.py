"""Exception hierarchy.

Three families map onto the CLI exit codes: configuration problems (2),
data problems (3) and numerical failures (4).
"""


class RareFlowError(Exception):
    exit_code = 1


class ConfigError(RareFlowError, ValueError):
    exit_code = 2


class DataError(RareFlowError):
    exit_code = 3


class NumericalError(RareFlowError, ArithmeticError):
    exit_code = 4


# --- configuration / contract violations
class InvalidInput(ConfigError):
    pass


class DimensionMismatch(ConfigError):
    pass


class ShapeMismatch(ConfigError):
    pass


class TapeMismatch(ConfigError):
    pass


class EmptyDims(ConfigError):
    pass


class IncompatibleTargets(ConfigError):
    pass


class NonPositiveGap(ConfigError):
    pass


# --- data problems
class ConstantDimension(DataError):
    pass


class TooFewSamples(DataError):
    pass


class EmptyData(DataError):
    pass


class EmptyStream(DataError):
    pass


class MissingTerms(DataError):
    pass


class MissingColumn(DataError):
    pass


class TooManyMalformed(DataError):
    pass


class NoPairsFound(DataError):
    pass


# --- numerical failures
class SingularComponent(NumericalError):
    pass


class NonFinite(NumericalError):
    pass


class NonFiniteActivation(NonFinite):
    pass


class NonFiniteWeight(NonFinite):
    pass


class DivergedLoss(NumericalError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class DegenerateFlow(NumericalError):
    pass


class MaxRejectionsExceeded(NumericalError):
    pass
