"""Exception types shared across the package."""


class F2TTAError(Exception):
    pass


class ConfigError(F2TTAError, ValueError):
    """Invalid configuration value; the message names the offending field."""


class ShapeError(F2TTAError, ValueError):
    pass


class ParameterError(F2TTAError, ValueError):
    pass


class UsageError(F2TTAError, RuntimeError):
    pass


class TrainingError(F2TTAError, RuntimeError):
    """Source training ended below the requested validation accuracy."""

    def __init__(self, message, loss_curve=None, val_accuracy=None):
        super().__init__(message)
        self.loss_curve = list(loss_curve or [])
        self.val_accuracy = val_accuracy


class MissingSampleError(F2TTAError, KeyError):
    def __init__(self, sample_id):
        super().__init__(sample_id)
        self.sample_id = sample_id

    def __str__(self):
        return f"sample {self.sample_id!r} not found in dataset"
