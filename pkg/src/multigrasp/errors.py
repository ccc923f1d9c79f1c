"""Exception hierarchy shared by every multigrasp module."""


class MultigraspError(Exception):
    """Base class for all toolkit errors."""

    #: CLI exit code used when this error escapes a subcommand.
    exit_code = 4


class InputError(MultigraspError):
    """Malformed or inconsistent input files and documents."""

    exit_code = 3


# raster-core
class DegeneratePolygon(MultigraspError):
    pass


class DimensionMismatch(MultigraspError):
    pass


class EmptyRegion(MultigraspError):
    pass


class NonConvexSweep(MultigraspError):
    pass


# gripper-model
class SpecParse(InputError):
    pass


class SymmetryMismatch(InputError):
    pass


class InvalidOpeningRange(InputError):
    pass


class WidthOutOfRange(MultigraspError):
    pass


class GripperOutOfFrame(MultigraspError):
    pass


# dataset-pipeline
class AnnotationParse(InputError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class PointOutOfScene(MultigraspError):
    pass


class SinkError(MultigraspError):
    pass


# awp-embedding
class DescriptorShape(MultigraspError):
    pass


class InsufficientTriplets(MultigraspError):
    pass


class Diverged(MultigraspError):
    def __init__(self, epoch: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at epoch {epoch}")
        self.epoch = epoch


class NoActions(MultigraspError):
    pass


# planner
class ModelRequired(InputError):
    pass


class ModelGripperMismatch(InputError):
    pass


# eval-harness
class AlignmentError(InputError):
    pass
