"""Topic modelling toolkit: HDP and embedded topic models for short-text corpora."""

__version__ = "0.1.0"


class TopicLabError(Exception):
    """Base class for errors raised by this package."""


class IngestError(TopicLabError):
    """Raised when raw input cannot be decoded or parsed."""


class ConfigurationError(TopicLabError):
    """Raised for invalid parameters or degenerate configurations."""


class TrainingError(TopicLabError):
    """Raised when an optimizer step produces non-finite parameters."""


class FormatError(TopicLabError):
    """Raised when a binary container does not match its expected layout."""
