"""Exception types shared across the package."""


class MglmmError(Exception):
    """Base class for all package-specific errors."""


class DomainError(MglmmError, ValueError):
    """A value lies outside the support / mean space / link domain."""


class ConfigError(MglmmError, ValueError):
    """A model specification or configuration file is invalid."""
