"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: missing inputs exit 2, configuration
problems exit 3, anything else (internal invariant violations) exit 4.
"""


class IraeWatchError(Exception):
    """Base class for all package-specific errors."""


class DataFormatError(IraeWatchError):
    """A file or record does not match its declared format."""


class ConfigError(IraeWatchError):
    """A configuration value violates a module invariant."""


class PipelineError(IraeWatchError):
    """An internal pipeline invariant was violated."""
