"""Exception types shared across the pipeline.

Each maps to a CLI exit code (see ``robustnd.cli``).
"""


class InputError(ValueError):
    """Caller passed data that violates an operation's precondition."""


class ConfigError(ValueError):
    """Invalid configuration value or registry state.

    ``key`` names the offending dotted config path when known.
    """

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class NumericalError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class TrainingFailure(RuntimeError):
    """Training diverged or missed a required quality floor."""


class MissingArtifact(FileNotFoundError):
    """An expected file or split is absent."""
