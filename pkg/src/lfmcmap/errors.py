"""Exception hierarchy shared across the pipeline.

The CLI maps these onto distinct exit codes, so stages should raise the
most specific class that applies.
"""


class LfmcError(Exception):
    """Base class for all package errors."""


class DomainError(LfmcError, ValueError):
    """An input value violates a documented precondition (bad weight,
    out-of-range percentage, negative reflectance, ...)."""


class ConfigError(LfmcError, ValueError):
    """Invalid or inconsistent configuration: missing files, bad column
    mappings, inverted date ranges, unknown modality names."""


class DataError(LfmcError, RuntimeError):
    """Well-configured run hit bad data: CRS mismatch, missing months,
    unreadable rasters, empty splits."""
