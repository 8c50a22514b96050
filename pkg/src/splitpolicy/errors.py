"""Exception hierarchy shared across the toolkit."""


class SplitPolicyError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(SplitPolicyError, ValueError):
    """Shapes, sizes or channel counts disagree."""


class AlreadyRGBAError(SplitPolicyError, ValueError):
    """Raised by ``to_rgba`` when the frame already carries an alpha channel."""


class NonFiniteError(SplitPolicyError, ValueError):
    """A tensor or weight contains NaN or infinity."""


class ConstraintError(SplitPolicyError):
    """A layer cannot be planned within the device texture/sample limits."""


class WeightsFormatError(SplitPolicyError, ValueError):
    """A weights file is malformed or disagrees with the declared spec."""


class ConfigError(SplitPolicyError, ValueError):
    """A key=value configuration file is invalid."""


class ServeError(SplitPolicyError):
    """The server rejected a request (mode or dimensions)."""
