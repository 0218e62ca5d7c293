"""Exception hierarchy shared across the package."""


class SimulationError(Exception):
    """Base class for every error raised by this package."""


class TraceError(SimulationError, ValueError):
    pass


class GraphError(SimulationError, ValueError):
    pass


class ConfigError(SimulationError, ValueError):
    """Invalid scenario configuration; ``problems`` lists every issue found."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class InvariantViolation(SimulationError, RuntimeError):
    """The simulation reached a state that should be impossible."""
