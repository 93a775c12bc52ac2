"""Exception hierarchy shared across the package."""


class PartKDError(Exception):
    """Base class for all errors raised by partkd."""


class ConfigError(PartKDError, ValueError):
    pass


class UnknownSchema(PartKDError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class ShapeError(PartKDError, ValueError):
    pass


class EmptySequence(PartKDError, ValueError):
    pass


class DatasetLoadError(PartKDError, IOError):
    """Base for failures while reading a dataset manifest or payload."""


class MissingPayload(DatasetLoadError):
    pass


class MalformedRecord(DatasetLoadError):
    pass


class SchemaMismatch(DatasetLoadError):
    pass


class ValidationError(DatasetLoadError, ValueError):
    """A record parsed fine but violates a dataset invariant."""


class MissingClass(PartKDError, ValueError):
    pass


class SamplerError(PartKDError, RuntimeError):
    pass


class CheckpointError(PartKDError, IOError):
    pass


class TrainingDiverged(PartKDError, RuntimeError):
    pass


class StageFailed(PartKDError, RuntimeError):
    """An experiment stage failed; ``stage`` names it and ``__cause__`` holds the original error."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
