"""
Error taxonomy shared by every module, and the exit codes the CLI maps them to.
"""

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class PseudoRepError(Exception):
    """Base class. `field` is an optional dotted path to the offending value."""

    def __init__(self, message: str, field: str = None):
        super().__init__(message)
        self.message = message
        self.field = field

    def __str__(self):
        return f"{self.field}: {self.message}" if self.field else self.message


class ConfigError(PseudoRepError, ValueError):
    """Invalid parameters or configuration."""


class FormatError(PseudoRepError):
    """Malformed file or record."""


class EmptyDatasetError(FormatError):
    pass


class NonFiniteError(FormatError):
    pass


class ConsistencyError(PseudoRepError):
    """Two inputs that should agree (ids, shapes, pools) do not."""


class InputError(PseudoRepError, ValueError):
    """Tensor with the wrong shape or an invalid probability matrix."""


class DegenerateTaskError(PseudoRepError):
    """Training request that cannot define a classification task."""


def exit_code_for(error: BaseException) -> int:
    return EXIT_USAGE if isinstance(error, ConfigError) else EXIT_RUNTIME
