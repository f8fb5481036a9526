"""Exception hierarchy shared by every subpackage."""


class MfgLabError(Exception):
    """Base class for all errors raised by mfglab."""


class ConfigurationError(MfgLabError, ValueError):
    """Malformed model, grid or experiment configuration."""


class UnsupportedModelError(ConfigurationError):
    """The model lacks structure required by the requested operation."""


class EvaluationError(MfgLabError, ArithmeticError):
    """A coefficient returned a non-finite value."""

    def __init__(self, message, clause=None):
        super().__init__(message)
        self.clause = clause


class DivergenceError(MfgLabError, ArithmeticError):
    """A simulated state or weight left the finite range."""

    def __init__(self, message, player=None, step=None, replica=None):
        super().__init__(message)
        self.player = player
        self.step = step
        self.replica = replica


class ResourceError(MfgLabError, MemoryError):
    """A requested allocation exceeds the configured memory budget."""


class DomainError(MfgLabError, ValueError):
    """Arguments outside an operation's mathematical domain."""


class DependencyError(MfgLabError, RuntimeError):
    """An experiment step ran before the step it depends on."""


class InternalError(MfgLabError, RuntimeError):
    """A numerical invariant that should hold by construction was violated."""
