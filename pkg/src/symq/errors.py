"""Exception hierarchy.

Everything raised on purpose derives from :class:`SymQError`. The CLI maps
:class:`ConfigError` to exit code 2 and every other subclass to exit code 3.
"""


class SymQError(Exception):
    """Base class for all package errors."""


class ConfigError(SymQError):
    pass


# expression trees
class CompleteTree(SymQError):
    pass


class IncompleteTree(SymQError):
    pass


class UnknownOp(SymQError):
    pass


class TooLong(SymQError):
    pass


class ConstantCountMismatch(SymQError):
    pass


class ParseError(SymQError):
    def __init__(self, message, position=None):
        self.position = position
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)


# data generation
class BudgetExceeded(SymQError):
    pass


class DomainTooSmall(SymQError):
    pass


class CorpusError(SymQError):
    """A corpus line could not be read; ``line`` is 1-based."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


# environment
class DegenerateTarget(SymQError):
    pass


class EpisodeFinished(SymQError):
    pass


# model / training
class NonFiniteInput(SymQError):
    pass


class NonFiniteLoss(SymQError):
    def __init__(self, message, record=None):
        self.record = record
        if record is not None:
            message = f"{message} (record {record})"
        super().__init__(message)


class EmptyCorpus(SymQError):
    pass


class NoPositives(SymQError):
    pass


class VersionMismatch(SymQError):
    pass


class CorruptCheckpoint(SymQError):
    pass


# inference / online
class AllRestartsFailed(SymQError):
    pass


class EmptyBuffer(SymQError):
    pass


# benchmarks
class UnknownSuite(SymQError):
    pass


class EntryMismatch(SymQError):
    pass
