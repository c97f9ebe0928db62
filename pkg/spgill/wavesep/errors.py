"""
Exception hierarchy for `spgill.wavesep`.

Everything derives from `RuntimeError` so callers that only care about
"something went wrong" can keep catching that.
"""


class WavesepError(RuntimeError):
    """Base class of every error raised by this package."""


class ConfigurationError(WavesepError):
    """Invalid configuration, or parameters that do not fit their input."""


class InvalidArgumentError(WavesepError, ValueError):
    """An operation was called with arguments outside its domain."""


class WavFormatError(WavesepError, OSError):
    """A WAV file is malformed or uses an unsupported encoding."""


class DatasetError(WavesepError):
    """A dataset or manifest could not be loaded or is inconsistent."""


class MetricError(WavesepError):
    """A metric could not be computed for the given signals."""


class NonFiniteGradientError(WavesepError):
    """An optimizer step received NaN or Inf gradients."""


class TrainingDivergedError(WavesepError):
    """
    The training loss became non-finite.

    The last checkpoint that was known to be good is attached as
    `checkpoint` (may be None if divergence happened before the first
    validation pass).
    """

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
