"""Exception types raised across the simulator."""


class SimError(Exception):
    """Base class for simulator errors."""


class ShapeError(SimError, ValueError):
    pass


class ParameterError(SimError, ValueError):
    pass


class NumericError(SimError, ArithmeticError):
    pass


class StateError(SimError, RuntimeError):
    pass


class ConfigError(SimError, ValueError):
    """Invalid experiment configuration. ``problems`` lists every offending field."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
