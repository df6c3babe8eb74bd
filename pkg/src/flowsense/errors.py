"""Error types shared across the library and mapped to CLI exit codes."""


class FlowsenseError(Exception):
    """Base class for all library errors."""


class ConfigError(FlowsenseError):
    """Invalid configuration, malformed inputs, or violated operation contracts."""

    exit_code = 2


class NumericalError(FlowsenseError):
    """Non-finite values or failed numerical procedures (divergence, no bracket)."""

    exit_code = 3


class MissingArtifactError(FlowsenseError):
    """A referenced checkpoint, dataset, or mask file does not exist."""

    exit_code = 4
