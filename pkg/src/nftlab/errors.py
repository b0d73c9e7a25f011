"""Exception types shared across the package."""


class SingularityError(ValueError):
    """A conversion was evaluated at a time where it is undefined."""


class DegenerateSplitError(ValueError):
    """A reward split leaves the positive or negative policy with no mass."""


class UndefinedRatioError(ValueError):
    """A density ratio was requested where the reference density vanishes."""


class GridError(ValueError):
    """A time grid is not strictly decreasing or has a zero log-SNR step."""


class CorruptedModelError(RuntimeError):
    """Model weights contain NaN or Inf."""


class TrainingDivergedError(RuntimeError):
    """A training loss became non-finite."""

    def __init__(self, message, last_good_params=None):
        super().__init__(message)
        self.last_good_params = last_good_params


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match the expected config."""


class RunAbortedError(RuntimeError):
    """A run stopped on an external failure (e.g. metrics IO); carries the current weights."""

    def __init__(self, message, params=None):
        super().__init__(message)
        self.params = params
