"""Exception hierarchy shared across the package."""


class STMRGNNError(Exception):
    """Base class for all package errors."""


class DimensionError(STMRGNNError):
    """Tensor or matrix shapes are inconsistent with an operation's contract."""


class SequenceTooShortError(DimensionError):
    """A temporal convolution was asked to consume a sequence shorter than its kernel."""


class ContractError(STMRGNNError):
    """An operation precondition was violated (non-scalar loss, empty inputs, ...)."""


class NumericError(STMRGNNError):
    """A non-finite value (NaN/Inf) appeared where the contract forbids it."""


class DegenerateGeometryError(STMRGNNError):
    """Node geometry admits no usable distance scale (e.g. all nodes coincide)."""


class ValidationError(STMRGNNError):
    """Input data failed schema or consistency validation."""


class ConfigError(STMRGNNError):
    """A configuration value is invalid or internally inconsistent."""


class CheckpointError(STMRGNNError):
    """A checkpoint file is corrupt or incompatible with the requested model."""


class TrainingDiverged(STMRGNNError):
    """Training hit a non-finite loss; carries the last-good result.

    The attached ``result`` holds the log up to the failing step with the
    best-validation parameters already restored on the model.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result
