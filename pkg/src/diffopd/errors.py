"""Exception types shared across the package.

Each carries the CLI exit code it maps to.
"""


class OPDError(Exception):
    exit_code = 1


class InvalidArgument(OPDError, ValueError):
    exit_code = 2


class ConfigError(OPDError):
    exit_code = 2


class NumericError(OPDError, ArithmeticError):
    exit_code = 3

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class MissingPrerequisite(OPDError):
    exit_code = 4
