"""Exception types shared across the toolkit."""


class SensorPerfError(Exception):
    """Base class; ``code`` is the machine-readable tag used by the CLI."""

    code = "Error"


class StructuralError(SensorPerfError):
    """Input data violates a structural invariant (bad file, bad stream)."""

    code = "StructuralError"


class ConfigError(SensorPerfError):
    """Invalid configuration or mismatched model/data."""

    code = "ConfigError"


class NumericalError(SensorPerfError):
    """Non-finite loss or gradient."""

    code = "NumericalError"


class MetricUndefined(SensorPerfError):
    """ROC AUC requested for single-class labels."""

    code = "MetricUndefined"
