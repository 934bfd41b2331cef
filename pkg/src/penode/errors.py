"""Exception hierarchy.

Every error raised by the library derives from :class:`PenodeError`; the
``exit_code`` attribute is used by the command line front-end to map error
classes onto distinct process exit statuses.
"""


class PenodeError(Exception):
    exit_code = 1


class ConfigError(PenodeError, ValueError):
    exit_code = 2


class DataError(PenodeError, ValueError):
    exit_code = 3


class NumericError(PenodeError, ArithmeticError):
    exit_code = 4


class FileFormatError(PenodeError, IOError):
    exit_code = 5


# -- event automaton --------------------------------------------------------

class RefOutOfRange(DataError):
    """PWM reference outside the carrier range [-A_c, A_c]."""


class MapIncomplete(DataError, KeyError):
    """Transition map has no entry for a realized (mode, switch word)."""

    def __str__(self):
        return Exception.__str__(self)


class DegenerateSchedule(NumericError):
    """Event scheduling stopped advancing in time."""


# -- dynamics / solvers -----------------------------------------------------

class DimensionMismatch(DataError):
    pass


class NonFiniteState(NumericError):
    pass


class StepUnderflow(NumericError):
    pass


class MaxStepsExceeded(NumericError):
    pass


class NotLinear(ConfigError):
    """Event-driven propagation requested for a model with a neural term."""


# -- training ----------------------------------------------------------------

class GridMismatch(DataError):
    pass


class NonFiniteGradient(NumericError):
    pass


class Diverged(NumericError):
    pass


class RatioInvalid(ConfigError):
    pass


class WindowTooLarge(DataError):
    pass


# -- deployment ---------------------------------------------------------------

class Overflow(NumericError):
    """Physics coefficient outside the Q16.16 range."""


class AccumulatorOverflow(NumericError):
    pass


class BadMagic(FileFormatError):
    pass


class CrcMismatch(FileFormatError):
    pass


class VersionUnsupported(FileFormatError):
    pass
