"""Exception hierarchy.

Every error carries an ``exit_code`` used by the command-line front end:
1 for invalid input, 2 for failures while running a valid input.
"""


class KineticError(Exception):
    exit_code = 2


class InputError(KineticError, ValueError):
    exit_code = 1


# graph
class EmptyMatrix(InputError):
    pass


class NegativeEntry(InputError):
    pass


class NonStochastic(InputError):
    pass


class Reducible(InputError):
    pass


class NoConvergence(KineticError):
    pass


class OutOfRangeControl(InputError):
    pass


# dynamics / control / spectral
class DimensionMismatch(InputError):
    pass


class WrongVariant(InputError):
    pass


class InvalidExponent(InputError):
    pass


class NonpositivePenalization(InputError):
    pass


class ZeroChi(InputError):
    pass


class ZeroDenominator(InputError):
    pass


class HeterogeneousParams(InputError):
    pass


class InvalidCriticalWarning(UserWarning):
    """Eradication-level penalization requested where no control is needed."""


# integrate
class NegativeStateBlowup(KineticError):
    pass


class NonFiniteState(KineticError):
    pass


class StepSizeTooLarge(KineticError):
    pass


class TrajectoryTooShort(InputError):
    pass


# mc
class StepTooLarge(InputError):
    pass


# scenario
class UnknownPreset(InputError):
    pass


class ParseError(InputError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class ScenarioValidationError(InputError):
    def __init__(self, message, key=None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)
