"""Exception hierarchy shared by every module."""


class MaskProbeError(Exception):
    """Base class for all errors raised by maskprobe."""


class DimensionError(MaskProbeError, ValueError):
    """Spatial sizes or tensor shapes disagree."""


class InvalidStatisticsError(MaskProbeError, ValueError):
    """Normalization statistics are unusable (non-positive std)."""


class ParameterError(MaskProbeError, ValueError):
    """A scalar parameter lies outside its admissible range."""


class DomainError(MaskProbeError, ValueError):
    """A function was evaluated outside its domain."""


class ConfigError(MaskProbeError, ValueError):
    """Invalid or unknown configuration."""


class ContractViolation(MaskProbeError, RuntimeError):
    """A model contract (e.g. the freeze contract on N) was broken."""


class DivergenceError(MaskProbeError, RuntimeError):
    """An optimization produced a non-finite objective.

    ``trace`` holds the objective values recorded up to the failure.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class GeometryError(MaskProbeError, ValueError):
    """Degenerate scene or camera geometry."""


class DependencyError(MaskProbeError, RuntimeError):
    """A required upstream artifact (checkpoint, dataset) is missing."""


class AnalysisError(MaskProbeError, RuntimeError):
    """An analysis protocol could not produce a result."""
