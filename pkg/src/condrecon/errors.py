"""Exception hierarchy shared by all subpackages."""


class ReconstructionError(Exception):
    """Base class for every error raised by condrecon."""


class InvalidGeometryError(ReconstructionError, ValueError):
    pass


class MeshingError(ReconstructionError):
    """Raised when the triangulator fails; ``last_iterate`` holds (points, triangles)."""

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class MeshFormatError(ReconstructionError, ValueError):
    """Parse or validation failure while reading a mesh file."""

    def __init__(self, message, line=None, element=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if element is not None:
            where.append(f"element {element}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.element = element


class InvalidProblemError(ReconstructionError, ValueError):
    pass


class NearSingularSystemError(ReconstructionError, ArithmeticError):
    pass


class SegmentationError(ReconstructionError, ValueError):
    pass


class NoCornerError(ReconstructionError):
    pass


class UnsupportedDiagnosticError(ReconstructionError):
    pass


class ConfigError(ReconstructionError, ValueError):
    """Configuration validation failure; ``path`` names the offending field."""

    def __init__(self, message, path=None):
        if path:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path
