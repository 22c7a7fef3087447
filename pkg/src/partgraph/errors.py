"""Exception hierarchy shared by the library and the CLI.

The CLI maps these onto process exit codes, so new error types should
subclass one of the three categories below rather than Exception.
"""


class PartgraphError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PartgraphError):
    """Invalid or inconsistent configuration (exit code 2)."""


class DataError(PartgraphError):
    """Broken input data: files, manifests, annotations (exit code 3)."""


class SchemaError(DataError):
    """Manifest or model file violates its declared schema."""


class NumericalError(PartgraphError):
    """Numerical failure during inference or training (exit code 4)."""
