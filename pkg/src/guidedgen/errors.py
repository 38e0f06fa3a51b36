"""Exception hierarchy shared across modules."""


class GuidedGenError(Exception):
    """Base class for every error raised by this package."""


class ContractViolation(GuidedGenError, ValueError):
    """A caller broke a documented precondition (e.g. querying past eos)."""


class EnumerationBudgetError(GuidedGenError):
    """Exhaustive enumeration would exceed the configured budget."""


class UndefinedInputError(GuidedGenError, ValueError):
    """The operation is undefined for the given input (e.g. empty references)."""


class TransportError(GuidedGenError):
    """An external service could not be reached. Safe to retry."""

    retryable = True


class ExtractionParseError(GuidedGenError):
    """An external service answered, but the answer could not be parsed."""

    retryable = False


class ReplayMissError(GuidedGenError, KeyError):
    """Replay mode was asked for a request that has no recorded response."""


class TrainingDivergedError(GuidedGenError, FloatingPointError):
    """The training loss became NaN or infinite."""


class BenchmarkMismatchError(GuidedGenError, ValueError):
    """Reports being compared were produced on different benchmarks."""


class EvaluationError(GuidedGenError):
    """Generation or scoring failed for one benchmark entry."""

    def __init__(self, index: int, cause: BaseException):
        super().__init__(f"entry {index}: {cause}")
        self.index = index
