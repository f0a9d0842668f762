"""Exception types shared across the toolkit.

Every error carries a ``stage`` tag so the command line can map failures to
exit codes without inspecting messages.
"""


class DemSolidError(Exception):
    stage = "solve"


class DomainError(DemSolidError, ValueError):
    """A material or numeric parameter lies outside its admissible range."""

    stage = "config"


class NonPositiveJacobian(DemSolidError, ArithmeticError):
    """det(F) <= 0 at one or more evaluation points."""

    def __init__(self, message, indices=None):
        super().__init__(message)
        self.indices = indices


class ParseError(DemSolidError, ValueError):
    stage = "geometry"


class ConsistencyWarning(UserWarning):
    """Mesh orientation or topology was repaired or is suspicious."""


class EmptySurface(DemSolidError):
    stage = "geometry"


class SamplingStalled(DemSolidError):
    stage = "sampling"


class DegenerateAxis(DemSolidError, ValueError):
    stage = "sampling"


class EmptyRegion(DemSolidError):
    stage = "sampling"


class NonFiniteGradient(DemSolidError, FloatingPointError):
    pass


class NonFiniteLoss(DemSolidError, FloatingPointError):
    pass


class Diverged(DemSolidError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class InvertedElement(DemSolidError):
    def __init__(self, message, tet_index=None):
        super().__init__(message)
        self.tet_index = tet_index


class NoConvergence(DemSolidError):
    def __init__(self, message, grad_norm=None):
        super().__init__(message)
        self.grad_norm = grad_norm


class ConfigError(DemSolidError, ValueError):
    stage = "config"


class RenderError(DemSolidError):
    stage = "render"
