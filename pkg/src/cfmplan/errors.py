"""Exception types shared across the package."""


class PlannerError(Exception):
    """Base class for every error raised by cfmplan."""


class ConfigError(PlannerError, ValueError):
    """Invalid configuration or precondition violation."""


class DegenerateInputError(PlannerError, ValueError):
    """Input for which the requested quantity is undefined (e.g. an all-true road mask)."""


class OutOfBoundsError(PlannerError, ValueError):
    """A waypoint falls outside the normalization box."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class NumericalError(PlannerError, ArithmeticError):
    """Non-finite values appeared in a loss, a state or a gradient."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class MissingArtifactError(PlannerError, FileNotFoundError):
    """An upstream artifact (manifest, vocabulary, checkpoint) does not exist."""

    def __init__(self, path):
        super().__init__(f"missing artifact: {path}")
        self.path = str(path)
