"""Exception types shared across the package."""


class InvalidInput(ValueError):
    """An argument violates an operation's precondition."""


class ConfigError(ValueError):
    """A config file or CLI invocation is malformed (maps to exit code 2)."""


class Diverged(RuntimeError):
    """Training hit a non-finite loss. Carries the partial trajectory log."""

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log
