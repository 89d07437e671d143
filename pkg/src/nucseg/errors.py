"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid configuration or input contract violation detected before compute."""


class PipelineError(RuntimeError):
    """Failure inside a pipeline stage."""
