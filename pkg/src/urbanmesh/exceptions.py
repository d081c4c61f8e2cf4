"""Exception hierarchy shared by all pipeline stages."""


class UrbanMeshError(Exception):
    """Base class for all library errors."""


class InvalidInputError(UrbanMeshError):
    """An argument violates a documented precondition."""


class DegenerateGeometryError(UrbanMeshError):
    """Geometry too degenerate for the requested estimate (collinear points, etc.)."""


class InsufficientCorrespondenceError(UrbanMeshError):
    """Not enough correspondences to run an estimator."""


class ParseError(UrbanMeshError):
    """Base class for file-format errors."""


class MalformedHeaderError(ParseError):
    """A file header is missing, unreadable, or has inconsistent fields."""


class TruncatedPayloadError(ParseError):
    """A binary payload is shorter than its header promises."""


class DuplicateIdError(ParseError):
    """The same entity id appears more than once in a file."""


class MeshAuditError(UrbanMeshError):
    """A halfedge-mesh structural invariant is violated."""


class StageError(UrbanMeshError):
    """A pipeline stage failed; carries the stage name for CLI attribution."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
