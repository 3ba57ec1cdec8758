"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates an operation's precondition (shape, range, membership)."""


class FormatError(ValueError):
    """An image or checkpoint has an unsupported layout."""


class NumericError(ArithmeticError):
    """A non-finite value appeared during an optimization."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class TrainingError(RuntimeError):
    """Reference model training diverged."""


class ProtocolError(RuntimeError):
    """The evaluation protocol cannot proceed (e.g. nothing survives filtering)."""


class ConfigError(ValueError):
    """A run configuration failed validation. ``field`` names the dotted path."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field
