"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not line up with what a network or buffer expects."""


class ConfigError(ValueError):
    """Invalid configuration or layout."""


class TrainingDiverged(RuntimeError):
    """A loss or gradient became non-finite.

    ``layer`` is the index of the offending layer when known, ``epoch`` the
    training epoch (or RL episode) in which it happened.
    """

    def __init__(self, message, layer=None, epoch=None):
        super().__init__(message)
        self.layer = layer
        self.epoch = epoch


class EpisodeDone(RuntimeError):
    """Raised when stepping an environment whose episode has already ended."""
