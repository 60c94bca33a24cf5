"""Exception hierarchy shared across the package."""


class DeepsimError(Exception):
    """Base class for all errors raised by this package."""


class ContainerError(DeepsimError):
    """Malformed weight container or missing/incompatible tensor."""


class ArchitectureError(DeepsimError):
    """Invalid network description or image incompatible with it."""


class ShapeMismatchError(DeepsimError):
    """Two feature stacks (or weights and a stack) disagree on shape."""


class DatasetError(DeepsimError):
    """Unreadable or inconsistent dataset layout."""


class ConfigError(DeepsimError):
    """Invalid experiment configuration."""


class TrainingDivergedError(DeepsimError):
    """Non-finite loss encountered; carries diagnostics for replay."""

    def __init__(self, message, *, epoch=None, batch=None, triplet_line=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.triplet_line = triplet_line
