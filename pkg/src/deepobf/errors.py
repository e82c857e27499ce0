"""Exception hierarchy shared across the package."""


class DeepObfError(Exception):
    """Base class for all errors raised by deepobf."""


class ShapeError(DeepObfError, ValueError):
    """Tensor extents do not fit an operation."""


class GraphError(DeepObfError, ValueError):
    """A model graph or block description is malformed."""


class InterfaceMismatchError(GraphError):
    """A replacement block does not expose the interface of the block it replaces."""


class AnalysisError(DeepObfError, ValueError):
    """A block cannot be analysed (receptive field or simulator planning)."""


class CollapseError(AnalysisError):
    """A block cannot be collapsed into one equivalent convolution."""


class DivergenceError(DeepObfError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, batch=None, log=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.log = log


class ModelFileError(DeepObfError):
    """A model file cannot be read."""


class VersionError(ModelFileError):
    pass


class TruncatedFileError(ModelFileError):
    pass


class ChecksumError(ModelFileError):
    pass


class DatasetError(DeepObfError, ValueError):
    pass


class ConfigError(DeepObfError, ValueError):
    pass


class ResumeMismatchError(DeepObfError):
    """A checkpoint directory belongs to a different plan, seed or dataset."""


class ClassCountError(DeepObfError, ValueError):
    """A dataset's class count does not fit the model or attack."""
