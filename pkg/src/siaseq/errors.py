"""Exception types shared across the package."""


class SiaSeqError(Exception):
    """Base class for every error this package raises on purpose."""


class ShapeError(SiaSeqError):
    """Operands violate a shape, arity, or index-range contract."""


class NumericError(SiaSeqError):
    """NaN where finite values are required, or a value outside an op's
    domain (e.g. log of a non-positive number)."""


class DataError(SiaSeqError):
    """Malformed corpus data, a bad vocabulary lookup, or an empty input
    where at least one element is required."""


class ConfigError(SiaSeqError):
    """A configuration object or file failed validation."""


class CheckpointError(SiaSeqError):
    """A model checkpoint could not be read or does not match the expected
    configuration."""
