"""
Errors
======
Exception hierarchy shared by every stage.

Input problems derive from InputValidationError (CLI exit code 2),
solver blow-ups from SolverDivergence (CLI exit code 3).
"""


class ReconstructionError(Exception):
    """Base class for everything the toolkit raises on purpose."""


class InputValidationError(ReconstructionError):
    exit_code = 2


class SolverDivergence(ReconstructionError):
    exit_code = 3


class ConfigError(InputValidationError):
    pass


class InvalidGeometry(InputValidationError):
    pass


class ImageFormatError(InputValidationError):
    pass


class InsufficientSmoothRegion(InputValidationError):
    pass


class AllZeroInput(InputValidationError):
    pass


class CoincidentLightAndVertex(InputValidationError):
    pass


class RankDeficient(InputValidationError):
    pass


class EmptyRegion(InputValidationError):
    pass


class SingularSystem(InputValidationError):
    pass


class DegenerateTruth(InputValidationError):
    pass


class DivergedSolve(SolverDivergence):
    pass


class PipelineDiverged(SolverDivergence):
    pass
