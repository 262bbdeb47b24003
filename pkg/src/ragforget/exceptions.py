"""Exception hierarchy shared by every ragforget module."""


class RagForgetError(Exception):
    """Base class for all errors raised by this package."""


# corpus
class MalformedLine(RagForgetError, ValueError):
    def __init__(self, line_no, reason=""):
        self.line_no = line_no
        msg = f"malformed line {line_no}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class EmptyDataset(RagForgetError, ValueError):
    pass


class MissingGenreHeader(RagForgetError, ValueError):
    pass


class InvalidRatios(RagForgetError, ValueError):
    pass


# backbone
class EmptyTrainingSet(RagForgetError, ValueError):
    pass


class UnknownUser(RagForgetError, KeyError):
    pass


class UnknownItem(RagForgetError, KeyError):
    pass


class CheckpointError(RagForgetError, ValueError):
    pass


# retrieval
class EmptyHistory(RagForgetError, ValueError):
    pass


class EmptyCandidates(RagForgetError, ValueError):
    pass


class GridMismatch(RagForgetError, ValueError):
    pass


# generator
class BackendUnreachable(RagForgetError, ConnectionError):
    pass


class GenerationTimeout(RagForgetError, TimeoutError):
    pass


class RepairExhausted(RagForgetError, RuntimeError):
    pass


class NoJsonFound(RagForgetError, ValueError):
    pass


class NotAnObject(RagForgetError, ValueError):
    pass


class IncompleteScores(RagForgetError, ValueError):
    pass


# eval
class EmptyTargets(RagForgetError, ValueError):
    pass


class NoEvaluableUsers(RagForgetError, ValueError):
    pass


class KGridMismatch(RagForgetError, ValueError):
    pass


class MissingCheckpoint(RagForgetError, FileNotFoundError):
    pass


class LeakageDetected(RagForgetError, AssertionError):
    """A forgotten item id reached a prompt. Should never happen."""
