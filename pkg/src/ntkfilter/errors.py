"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so library code should raise
the most specific one that applies instead of a bare ValueError.
"""


class ConfigError(ValueError):
    """Invalid configuration: bad flag values, malformed files, shape mismatches."""


class DivergenceError(RuntimeError):
    """An iterative procedure produced non-finite values or an unstable spectrum."""


class UnsupportedArchitectureError(ValueError):
    """The requested operation does not support this layer stack."""
