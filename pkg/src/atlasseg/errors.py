"""Exception hierarchy shared by all atlasseg modules."""


class AtlasSegError(Exception):
    """Base class for every error raised by atlasseg."""


class BoundsError(AtlasSegError, IndexError):
    pass


class GeometryError(AtlasSegError, ValueError):
    """Invalid geometry, or two volumes that should share a grid do not."""


class InterpolationError(AtlasSegError, ValueError):
    pass


class NiftiError(AtlasSegError):
    pass


class NiftiFormatError(NiftiError, ValueError):
    pass


class UnsupportedDatatypeError(NiftiError, ValueError):
    pass


class CorruptFileError(NiftiError, ValueError):
    pass


class LabelDomainError(AtlasSegError, ValueError):
    pass


class SettingsError(AtlasSegError, ValueError):
    pass


class EmptyMaskError(AtlasSegError, ValueError):
    pass


class NumericalError(AtlasSegError, ArithmeticError):
    pass


class NoOverlapError(AtlasSegError, ValueError):
    pass


class DivergenceError(AtlasSegError, ArithmeticError):
    def __init__(self, message, stage=None, iteration=None):
        super().__init__(message)
        self.stage = stage
        self.iteration = iteration


class UndefinedMetricError(AtlasSegError, ValueError):
    pass


class ConfigError(AtlasSegError, ValueError):
    pass


class PairingError(GeometryError):
    """An image and its label map (or other paired grids) disagree on geometry."""


class AlignmentError(GeometryError):
    """Volumes that are fused or averaged voxel-wise are not on one grid."""


class CaseError(AtlasSegError):
    """A failure attributed to one case of a batch; ``case`` names it."""

    def __init__(self, case, cause: Exception):
        super().__init__(f"case {case!r}: {type(cause).__name__}: {cause}")
        self.case = case
        self.cause = cause
