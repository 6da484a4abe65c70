"""Exception types shared across the package."""


class ParameterError(ValueError):
    """A parameter lies outside its admissible domain."""


class GrazingError(ValueError):
    """A direction is (numerically) tangent to the slab."""


class ConfigError(ValueError):
    """A JSON config is missing a field or has a malformed value."""

    def __init__(self, field, message=None):
        self.field = field
        super().__init__(message or f"invalid or missing field '{field}'")


class EstimationError(RuntimeError):
    """A statistic cannot be computed from the available samples."""


class FitError(RuntimeError):
    """The optimizer hit a non-finite loss."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state
