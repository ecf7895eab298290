"""Exception hierarchy shared by every stage of the pipeline."""


class LabelPropError(Exception):
    """Base class for all errors raised by labelprop3d."""


class InvalidParameterError(LabelPropError, ValueError):
    """A numeric parameter is outside its admissible range."""


class InvalidPoseError(LabelPropError, ValueError):
    """A rotation matrix is not a proper orthonormal rotation."""


class ContractViolation(LabelPropError):
    """An operation was called with inputs that break its preconditions."""


class FormatError(LabelPropError):
    """A file on disk does not follow its declared binary or text layout."""


class ProtocolError(FormatError):
    """A cluster or prediction exchange file is malformed."""


class LabelMappingError(LabelPropError, KeyError):
    """A label id is not declared by the mapping in use."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class BackendError(LabelPropError):
    """The segmentation backend failed on one or more clusters."""

    def __init__(self, message, cluster_ids=()):
        super().__init__(message)
        self.cluster_ids = tuple(cluster_ids)


class IncompleteCoverageError(LabelPropError):
    """Fusion found residual points that received no backend prediction."""
