"""Shared exception types. The CLI maps these onto exit codes."""


class ProtoPartError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ProtoPartError):
    """Invalid configuration or inputs inconsistent with the configuration."""


class ValidationError(ProtoPartError):
    """Malformed user-supplied data (manifests, masks, valid sets, requests)."""


class NumericError(ProtoPartError):
    """Non-finite values or numerical breakdown, with the site identified."""


class DivergenceError(NumericError):
    """Training produced a non-finite objective; last good checkpoint kept."""

    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
