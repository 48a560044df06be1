"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    """An argument violates an operation's preconditions."""


class ConfigurationError(ValueError):
    """A model or run configuration is internally inconsistent."""


class DiagnosticError(RuntimeError):
    """A numerical failure with an attached diagnosis (offending block, step, ...)."""
