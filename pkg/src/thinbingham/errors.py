"""Exception hierarchy shared by all modules."""


class ThinBinghamError(Exception):
    """Base class for every error raised by the package."""


class ProfileError(ThinBinghamError, ValueError):
    """Invalid roughness profile (non-positive heights, bad parameters)."""


class MeshError(ThinBinghamError, ValueError):
    """Mesh construction failed (bad resolution, degenerate elements)."""


class H2ViolationError(MeshError):
    """The macroscopic square does not hold an integer number of cells."""


class AssemblyError(ThinBinghamError):
    """Singular element Jacobian or inconsistent function space."""


class FieldMismatchError(ThinBinghamError, ValueError):
    """Field does not live on the mesh/space it is combined with."""


class ParameterError(ThinBinghamError, ValueError):
    """Invalid solver or fluid parameter."""


class NonConvergenceError(ThinBinghamError):
    """An iterative solver hit its iteration cap.

    ``history`` holds the residual records collected before giving up.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])


class ThresholdAboveRangeError(ThinBinghamError):
    """Yield-threshold bisection found no flowing force below ``r_max``."""


class PartialTableError(NonConvergenceError):
    """Some mobility samples failed; ``failed`` lists their indices."""

    def __init__(self, message, failed, history=None):
        super().__init__(message, history)
        self.failed = list(failed)


class ExtrapolationError(ThinBinghamError, ValueError):
    """Mobility evaluated beyond the largest tabulated radius."""


class ConfigError(ThinBinghamError, ValueError):
    """Experiment configuration is malformed."""
