"""Exception types shared across the package."""


class RoadError(Exception):
    """Base class for all package errors."""


class ConfigError(RoadError, ValueError):
    """Invalid configuration, shapes or arguments."""


class GeometryError(RoadError, ValueError):
    """Unparseable or degenerate geometry input."""


class FormatError(RoadError, ValueError):
    """Malformed on-disk archive or cache."""


class TrainingError(RoadError, RuntimeError):
    """Numerical failure during optimization."""


class InferenceError(RoadError, RuntimeError):
    """Numerical failure while evaluating the network."""
