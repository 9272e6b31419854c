"""Exception types shared across the package."""


class StrandGPError(Exception):
    """Base class for all package errors."""


class DataError(StrandGPError):
    """Invalid or inconsistent input data (files, matrices, annotations)."""


class ConfigError(StrandGPError):
    """Invalid run configuration."""


class NumericalError(StrandGPError):
    """A numerical operation left its validity domain (PD failure, overflow)."""
