"""Exception hierarchy shared by every prunecast module."""


class PrunecastError(Exception):
    """Base class for all errors raised by the package."""


class ShapeError(PrunecastError, ValueError):
    """Array dimensions are inconsistent with an operation's contract."""


class DataError(PrunecastError, ValueError):
    """Malformed or inconsistent input data (CSV files, node ids, splits)."""


class SplitError(DataError):
    """A chronological split is too short to hold a single window."""


class NumericalError(PrunecastError, ArithmeticError):
    """Non-finite values appeared during optimisation or evaluation."""


class TrainingError(NumericalError):
    """Training aborted; the message carries epoch/batch or parameter context."""


class PruneDegenerateError(NumericalError):
    """Pruning has nothing to work with (no positive scores, empty graph)."""


class TransferError(PrunecastError, ValueError):
    """A checkpoint cannot be transferred to the requested target."""
