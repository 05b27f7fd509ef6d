"""Exception hierarchy shared by every stage of the pipeline."""


class GAJourneyError(Exception):
    """Base class for user-facing errors (bad input, bad configuration)."""


class MalformedHeader(GAJourneyError):
    pass


class BadValue(GAJourneyError):
    def __init__(self, line: int, column: str, message: str = ""):
        self.line = line
        self.column = column
        detail = f": {message}" if message else ""
        super().__init__(f"bad value at line {line}, column {column!r}{detail}")


class DuplicateKey(GAJourneyError):
    pass


class MissingColumn(GAJourneyError):
    pass


class ShapeMismatch(GAJourneyError):
    pass


class ZeroTransactionsGlobally(GAJourneyError):
    pass


class EmptyStages(GAJourneyError):
    pass


class NotFitted(GAJourneyError):
    pass


class InsufficientRows(GAJourneyError):
    pass


class EmptyHitSequence(GAJourneyError):
    pass


class StaleTrace(GAJourneyError):
    pass


class DegenerateSplit(GAJourneyError):
    pass


class NonFiniteLoss(GAJourneyError):
    pass


class MissingParams(GAJourneyError):
    pass


class EmptyPopulation(GAJourneyError):
    pass


class NoTargets(GAJourneyError):
    pass


class InvalidConfig(GAJourneyError):
    pass
