"""Exception types raised across the package."""


class OaflError(Exception):
    """Base class for all package errors."""


class TopologyError(OaflError):
    """AP/device partition is not a valid partition of the device set."""


class DimensionError(OaflError, ValueError):
    """Array shapes are inconsistent."""


class ConstraintError(OaflError):
    """A power or rate constraint is violated."""


class ConfigError(OaflError, ValueError):
    pass


class DataError(OaflError, ValueError):
    pass


class ParameterError(OaflError, ValueError):
    pass


class EstimationError(OaflError):
    pass


class DomainError(OaflError, ValueError):
    """Input matrix outside the domain of a formula (e.g. not PSD)."""


class NumericError(OaflError, ArithmeticError):
    pass


class FeasibilityError(OaflError):
    """No L-DSC parameter satisfies the fronthaul rate constraints."""

    def __init__(self, message, subset=None):
        super().__init__(message)
        self.subset = subset


class RateError(OaflError):
    """Fronthaul rate too small to encode one bit per element."""


class TrainingError(OaflError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class StageError(OaflError):
    """A sub-solver failed inside a composite procedure."""

    def __init__(self, message, stage, round_index=None):
        super().__init__(message)
        self.stage = stage
        self.round_index = round_index
