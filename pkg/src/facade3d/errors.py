"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line front end can map
failures to distinct process exit statuses without a lookup table.
"""


class Facade3DError(Exception):
    exit_code = 1


class ConfigError(Facade3DError):
    exit_code = 3


class DomainError(Facade3DError, ValueError):
    exit_code = 4


# -- geometry ---------------------------------------------------------------

class GeometryError(Facade3DError):
    exit_code = 5


class ParallelRay(GeometryError):
    pass


class BehindCamera(GeometryError):
    pass


class DegenerateRay(GeometryError):
    pass


class DegenerateTriangle(GeometryError):
    pass


class DegenerateExtent(GeometryError):
    pass


class DegeneratePose(GeometryError):
    pass


class EmptySegment(GeometryError):
    pass


# -- dataset ----------------------------------------------------------------

class DatasetError(Facade3DError):
    exit_code = 6


class ManifestParseError(DatasetError):
    pass


class InvariantViolation(DatasetError):
    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class MissingFileError(DatasetError):
    pass


class EmptySelection(DatasetError):
    pass


# -- processing stages ------------------------------------------------------

class EmptyClusterSet(Facade3DError):
    exit_code = 7


class InsufficientMatches(Facade3DError):
    exit_code = 8


class AlignmentFailed(Facade3DError):
    exit_code = 8


class InsufficientStructure(Facade3DError):
    exit_code = 9


class CropOutOfBounds(Facade3DError):
    exit_code = 9


class OutOfFacade(Facade3DError):
    exit_code = 10


class DegenerateFacade(Facade3DError):
    exit_code = 10


class UndefinedMetric(Facade3DError):
    exit_code = 11


class StageError(Facade3DError):
    """Wraps a failure inside a named pipeline stage."""

    exit_code = 12

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
