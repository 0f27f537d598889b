"""Exception hierarchy.

The CLI maps these onto exit codes: format errors exit 2, contract
violations exit 3, training divergence exits 4.
"""


class NarAsrError(Exception):
    """Base class for all package errors."""


class FormatError(NarAsrError):
    """A file (vocabulary, dataset, checkpoint, config) is malformed."""


class ContractViolation(NarAsrError):
    """A caller broke a documented precondition between components."""


class DimensionError(ContractViolation, ValueError):
    """Tensor shapes do not agree."""


class ConfigurationError(ContractViolation, ValueError):
    """A configuration value is outside its legal range."""


class UsageError(ContractViolation):
    """An object was used in a state that does not permit the operation."""


class CtcInfeasibleError(NarAsrError, ValueError):
    """The target cannot be aligned to the available frames."""


class NonFiniteError(NarAsrError, FloatingPointError):
    """A forward operation produced NaN or Inf."""


class TrainingDivergence(NarAsrError):
    """Training produced a non-finite loss.

    ``last_good`` holds the parameters from the last step whose loss was finite.
    """

    def __init__(self, message, last_good=None, step=None):
        super().__init__(message)
        self.last_good = last_good
        self.step = step
