"""Exception taxonomy shared by all modules.

Each category maps to a distinct CLI exit code (see cli.EXIT_CODES); library
code raises these instead of bare ValueError so callers can route failures.
"""


class OpinetError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(OpinetError):
    """Operand shapes are incompatible."""


class ParameterError(OpinetError):
    """An argument value is outside its documented range."""


class ContractViolation(OpinetError):
    """A documented precondition or invariant was violated."""


class SpecError(OpinetError):
    """A layer/model specification is internally inconsistent."""


class FormatError(OpinetError):
    """A binary or JSON file does not match its declared format."""


class StabilityError(OpinetError):
    """A numerical stability condition (CFL) failed."""


class SolverError(OpinetError):
    """An iterative solver did not converge within its budget."""


class NumericError(OpinetError):
    """A non-finite value appeared where finiteness is required."""


class ResourceError(OpinetError):
    """A configured resource cap was exceeded."""


class DegenerateKernelError(OpinetError):
    """The NTK spectrum has no usable positive eigenvalue."""


class ConfigError(OpinetError):
    """A run configuration is malformed or violates a constraint."""


class DataError(OpinetError):
    """A dataset file is missing, unreadable, or inconsistent."""
