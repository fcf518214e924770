"""Exception types shared across the toolkit.

Every error raised by the public API derives from :class:`MiaLensError` so
callers can catch one base class.  Validation failures (bad arguments, bad
configuration) and runtime faults (diverged training, non-finite numerics)
are kept distinct because the command-line driver maps them to different
exit codes.
"""


class MiaLensError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(MiaLensError, ValueError):
    """An argument violates a documented precondition."""


class InvalidConfigurationError(MiaLensError):
    """A run configuration is malformed or internally inconsistent."""


class DatasetNotFoundError(MiaLensError):
    """The named dataset is absent from the storage root."""


class DatasetDecodeError(MiaLensError):
    """A dataset file exists but cannot be decoded.

    ``index`` points at the offending record when one can be identified,
    otherwise it is None.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class InsufficientDataError(MiaLensError):
    """A partition or subsample request asks for more samples than exist."""


class InvalidLayerError(MiaLensError):
    """A layer id does not resolve against the model's observable layers."""


class InvalidDatasetError(MiaLensError):
    """A training set is unusable, e.g. empty or single-class."""


class TrainingDivergedError(MiaLensError):
    """Training produced a non-finite loss and was aborted.

    ``epoch`` records the epoch (0-based) at which divergence was detected.
    """

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class NumericFaultError(MiaLensError):
    """A forward pass or attribution produced NaN or Inf values.

    ``index`` identifies the offending sample within the batch when known.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class CapabilityError(MiaLensError):
    """A model does not expose what an operation needs, e.g. a gradient
    block was requested for a parameter the model does not have."""


class DependencyError(MiaLensError):
    """A pipeline stage needs an artifact that no earlier stage produced."""


class StageFailureError(MiaLensError):
    """A pipeline stage failed; partial artifacts are left on disk.

    ``stage`` names the stage that failed.
    """

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage
