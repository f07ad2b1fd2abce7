"""Exception hierarchy and CLI exit codes."""


class PlanartrackError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class InputValidationError(PlanartrackError):
    """Bad numeric input (non-finite values, shape mismatch, invalid range)."""

    exit_code = 2


class ConfigError(PlanartrackError):
    """Malformed or schema-violating configuration."""

    exit_code = 2


class DependencyError(PlanartrackError):
    """A pipeline stage is missing a required upstream artifact."""

    exit_code = 3


class SimulationDivergedError(PlanartrackError):
    """Integration produced non-finite state. Carries the offending state."""

    exit_code = 4

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class OptimizationError(PlanartrackError):
    """An iterative optimizer produced a non-finite objective."""

    exit_code = 4

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class InvalidClipError(PlanartrackError):
    """Motion clip violates a structural precondition (too short, bad shapes)."""

    exit_code = 2
