"""Exception types raised across the package."""


class FusebedError(Exception):
    """Base class for all package errors."""


class DimensionError(FusebedError, ValueError):
    pass


class ConfigurationError(FusebedError, ValueError):
    pass


class DegenerateVectorError(FusebedError, ValueError):
    pass


class VocabularyError(FusebedError, ValueError):
    pass


class EvaluationError(FusebedError, ValueError):
    """Raised for non-finite objective values or empty evaluations."""


class DivergenceError(FusebedError, FloatingPointError):
    pass


class MetadataError(FusebedError, ValueError):
    pass


class DatasetError(FusebedError, ValueError):
    """Malformed or inconsistent dataset files."""


class CheckpointError(FusebedError, ValueError):
    pass
