"""flowsense: flow field reconstruction on mesh graphs from sparse sensors,
plus learned sensor placement via constrained policy gradients."""

from .errors import ConfigError, FlowsenseError, MissingArtifactError, NumericalError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FlowsenseError",
    "MissingArtifactError",
    "NumericalError",
    "__version__",
]
