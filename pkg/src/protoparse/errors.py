"""Exception hierarchy shared across the package."""


class ProtoParseError(Exception):
    """Base class for every error raised by protoparse."""


class DataError(ProtoParseError):
    """Malformed or unusable input data."""


class InvariantViolation(ProtoParseError):
    """A round-trip or structural invariant failed."""


# logical forms

class LFSyntaxError(DataError):
    pass


class UnbalancedParens(LFSyntaxError):
    pass


class EmptyExpression(LFSyntaxError):
    pass


class IllegalToken(LFSyntaxError):
    pass


class UnknownAtomCategory(DataError):
    pass


class SlotArityMismatch(DataError):
    pass


# idioms

class UnknownIdiomSymbol(DataError):
    pass


class IncompatibleRoots(ProtoParseError):
    pass


# transition system

class InapplicableAction(ProtoParseError):
    pass


class IncompleteParse(ProtoParseError):
    pass


# numerics

class ShapeMismatch(ProtoParseError):
    pass


class NonFiniteInput(ProtoParseError):
    pass


class NonScalarLoss(ProtoParseError):
    pass


# model / training

class EmptyApplicableSet(ProtoParseError):
    pass


class StepLimitExceeded(ProtoParseError):
    pass


class EmptyPop(ProtoParseError):
    pass


class MissingNodeState(ProtoParseError):
    pass


class GoldActionInapplicable(InvariantViolation):
    pass


class EmptySupportStates(ProtoParseError):
    pass


class BatchTooSmall(ProtoParseError):
    pass


class MissingPrototype(ProtoParseError):
    pass


class EmptyTrainSet(DataError):
    pass


class UncoveredNewAction(DataError):
    pass


# data / evaluation

class MalformedLine(DataError):
    def __init__(self, line_no, message=""):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}" if message else f"line {line_no}")


class OracleRoundTripFailure(InvariantViolation):
    def __init__(self, line_no, message=""):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}" if message else f"line {line_no}")


class InsufficientExamplesForPredicate(DataError):
    def __init__(self, symbol, message=""):
        self.symbol = symbol
        super().__init__(message or f"not enough examples for predicate {symbol!r}")


class TooFewPairs(ProtoParseError):
    pass


class AllZeroDifferences(ProtoParseError):
    pass


class ConfigError(ProtoParseError):
    """Invalid configuration: unknown keys or out-of-range values."""
