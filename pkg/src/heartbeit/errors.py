"""Exception hierarchy shared by every stage of the pipeline."""


class HeartBeitError(Exception):
    """Base class for all pipeline errors."""


class ArgumentError(HeartBeitError, ValueError):
    pass


class DerivationError(HeartBeitError):
    pass


class FilterDesignError(HeartBeitError, ValueError):
    pass


class LengthError(HeartBeitError, ValueError):
    pass


class IngestError(HeartBeitError):
    pass


class ParseError(IngestError):
    pass


class SchemaError(IngestError):
    pass


class LabelError(IngestError):
    pass


class SplitError(HeartBeitError):
    pass


class RenderError(HeartBeitError):
    pass


class PatchError(HeartBeitError, ValueError):
    pass


class FormatError(HeartBeitError):
    """A binary artifact file is truncated or carries the wrong magic/version."""


class TokenizerError(HeartBeitError):
    pass


class ModelError(HeartBeitError):
    pass


class TrainingError(HeartBeitError):
    pass


class MetricError(HeartBeitError):
    pass


class SaliencyError(HeartBeitError):
    pass


class ConfigError(HeartBeitError):
    pass


class DependencyError(HeartBeitError):
    """A required upstream artifact is missing or was produced under another config."""
