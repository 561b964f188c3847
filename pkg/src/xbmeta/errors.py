class XbmetaError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(XbmetaError, ValueError):
    pass


class LayoutError(XbmetaError, ValueError):
    """Parameter layouts or array shapes do not line up."""


class NumericError(XbmetaError, ArithmeticError):
    pass


class FormatError(XbmetaError, ValueError):
    """A file on disk is malformed, truncated or of the wrong version."""
