"""Exception types shared across the package."""


class FediskitError(Exception):
    """Base class for all package-specific errors."""


class IdxFormatError(FediskitError, ValueError):
    """IDX file magic number or structure is wrong."""


class DataMismatchError(FediskitError, ValueError):
    """Two inputs that must agree (e.g. image/label counts) do not."""


class InfeasibleError(FediskitError, ValueError):
    """A requested partition or fit cannot be satisfied by the data."""


class DimensionMismatchError(FediskitError, ValueError):
    """A vector's dimensionality does not match the model's."""


class SolverError(FediskitError, RuntimeError):
    """A linear system could not be solved (singular or non-finite)."""


class TrainingDivergenceError(FediskitError, RuntimeError):
    """Training produced a non-finite loss."""


class ConfigError(FediskitError, ValueError):
    """Run configuration is malformed or out of range."""
