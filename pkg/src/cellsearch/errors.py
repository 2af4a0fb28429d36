"""Exception taxonomy shared across the package."""


class ArgumentError(ValueError):
    """Bad argument value (negative stride, probability sum violation, ...)."""


class DimensionError(ValueError):
    """Incompatible array shapes or spatial sizes."""


class ValidationError(ValueError):
    """A structured object (genotype, manifest row) violates its invariants."""


class ParseError(ValueError):
    """Malformed text input; message carries line/field diagnostics."""


class ConfigError(ValueError):
    """Bad configuration key, value, or combination."""


class FormatError(ValueError):
    """Unsupported binary/file format field."""


class NumericError(RuntimeError):
    """Non-finite value encountered where finite math was required."""
