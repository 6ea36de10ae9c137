"""Exception hierarchy shared by every module."""


class LabError(Exception):
    pass


class ConfigError(LabError, ValueError):
    """Bad configuration or mismatched dimensions."""


class ContractViolation(LabError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class DivergenceError(LabError, RuntimeError):
    """Training produced a non-finite gradient, target or loss."""


class PrecisionError(LabError, RuntimeError):
    """A numerical oracle could not reach its requested accuracy."""


class InfeasibleError(LabError, RuntimeError):
    """An exact computation would be too large to enumerate."""


class EstimatorError(LabError, RuntimeError):
    pass
