"""Exception types shared across the package."""


class NTPError(Exception):
    pass


class UnsatisfiableLayoutError(NTPError):
    """Rejection sampling could not place every object without collision."""


class ApiArgumentError(NTPError):
    pass


class ConfigurationError(NTPError):
    pass


class InvalidTreeError(NTPError):
    pass


class ShapeError(NTPError):
    pass


class NonFiniteError(NTPError):
    pass


class TrainingDivergenceError(NonFiniteError):
    pass


class CheckpointError(NTPError):
    pass
