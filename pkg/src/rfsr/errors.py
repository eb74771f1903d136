"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shape or size violates an operation's contract."""


class ConfigurationError(ValueError):
    """Invalid, missing, or inconsistent configuration or component."""
