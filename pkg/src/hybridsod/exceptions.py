"""Exception hierarchy. CLI exit codes hang off ``exit_code``."""


class HybridSODError(Exception):
    exit_code = 1


class ConfigError(HybridSODError, ValueError):
    exit_code = 2


class DataError(HybridSODError):
    exit_code = 3


class ShapeError(HybridSODError, ValueError):
    exit_code = 3


class MisuseError(HybridSODError, ValueError):
    exit_code = 2


class PipelineStateError(HybridSODError):
    exit_code = 4


class TrainingAborted(HybridSODError):
    """Raised when training produces a non-finite loss."""

    exit_code = 4
