"""Exception types shared across the toolkit.

DataError subclasses map to CLI exit code 2, NumericError to exit code 3.
"""


class SpkverError(Exception):
    """Base class for all toolkit errors."""


class DataError(SpkverError):
    """Invalid or unusable input data."""


class WaveformTooShort(DataError):
    pass


class InvalidSampleRate(DataError):
    pass


class AllFramesRemoved(DataError):
    """VAD removed every frame; the utterance is unusable."""


class UtteranceTooShort(DataError):
    pass


class NoValidTriplet(DataError):
    """Minibatch contains no (anchor, positive, negative) combination."""


class DegenerateCovariance(DataError):
    """Covariance estimate is rank deficient beyond repair."""


class DegenerateInput(DataError):
    """An input the loss leaves undefined, e.g. a zero-norm embedding."""


class SingleClassScores(DataError):
    """EER/DET need at least one target and one nontarget score."""


class InsufficientUtterances(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class ZeroVector(DataError):
    pass


class NumericError(SpkverError):
    """Non-finite values appeared during optimization."""


class StageError(SpkverError):
    """A pipeline stage failed; carries the stage name and the cause."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
