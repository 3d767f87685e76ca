"""Exception hierarchy shared across the toolkit."""


class GriddownError(Exception):
    """Base class for all toolkit errors."""


class OutOfExtent(GriddownError):
    """A target point falls outside the source grid's coverage."""


class ShapeMismatch(GriddownError):
    """Array shapes are inconsistent with the declared grid or config."""


class NonSquareField(GriddownError):
    """Operation requires a square field."""


class DegenerateVariable(GriddownError):
    """A variable is (near-)constant so its standard deviation is unusable."""


class MissingStats(GriddownError):
    """Standardization statistics do not cover a requested variable."""


class MissingGroup(GriddownError):
    """A model bundle lacks one of the required weight groups."""


class NonFiniteLoss(GriddownError):
    """Training loss became NaN or infinite."""


class NonFiniteActivation(GriddownError):
    """A forward pass produced non-finite values; message names the stage."""


class DataExhausted(GriddownError):
    """A required data split is empty."""


class SeriesTooShort(GriddownError):
    """Time series shorter than the detection window allows."""


class InvalidRoughness(GriddownError):
    """Roughness length incompatible with the profile-law heights."""


class ConfigInvalid(GriddownError):
    """CLI configuration failed schema validation."""

    exit_code = 2


class MissingArtifact(GriddownError):
    """A referenced dataset/model/report path does not exist."""

    exit_code = 3


class ComputeFailure(GriddownError):
    """A command failed while computing its outputs."""

    exit_code = 4
