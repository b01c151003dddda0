"""Exception hierarchy shared by all modules."""


class ThermoIsaacsError(Exception):
    """Base class for all library errors."""


class InadmissibleInitialPair(ThermoIsaacsError, ValueError):
    pass


class InadmissibleInitialState(ThermoIsaacsError, ValueError):
    pass


class StepTooLarge(ThermoIsaacsError, ValueError):
    pass


class ProblemSpecError(ThermoIsaacsError, ValueError):
    """Malformed problem file or expression."""


class DiscreteZenoViolation(ThermoIsaacsError):
    pass


class InadmissibleControl(ThermoIsaacsError, ValueError):
    pass


class EmptyAdmissibleSet(ThermoIsaacsError):
    pass


class OutsideCube(ThermoIsaacsError, ValueError):
    pass


class MaxIterExceeded(ThermoIsaacsError):
    def __init__(self, message, residual=None, factors=None, field=None):
        super().__init__(message)
        self.residual = residual
        self.factors = list(factors or [])
        self.field = field
