"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent user-supplied configuration."""


class NumericalError(RuntimeError):
    """A numerical procedure failed (non-convergence, instability, bracket loss)."""
