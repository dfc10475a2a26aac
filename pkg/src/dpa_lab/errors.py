"""Exception hierarchy. Config-class errors map to CLI exit code 2, the rest to 1."""


class DpaLabError(Exception):
    pass


class ConfigError(DpaLabError):
    """Invalid configuration, shapes fixed by config, or unusable inputs."""


class VocabularyError(ConfigError):
    """Class name not present in the model vocabulary."""


class ShapeError(DpaLabError):
    """Operand shapes incompatible for an operation."""


class NumericError(DpaLabError):
    """NaN/Inf where finite values are required."""


class GraphError(DpaLabError):
    """Autodiff tape misuse, e.g. backward() twice on one forward."""


class EmptyKeysError(DpaLabError):
    """Attention called with zero key rows."""


class EmptyBankError(DpaLabError):
    """Prompt generation over an empty instance bank."""


class RoutingError(DpaLabError):
    """Task routing failure (e.g. zero-norm query feature)."""


class AssignmentError(DpaLabError):
    """No valid positive token assignment for a ground-truth box."""


class MetricError(DpaLabError):
    """Metric undefined for the given matrix (e.g. FFP with a single task)."""


class TrainingError(DpaLabError):
    """Divergence or other unrecoverable failure during optimization."""
