"""Exception types raised across the package."""


class ShellOptError(Exception):
    """Base class for all package errors."""


class DomainError(ShellOptError, ValueError):
    """Parameter value outside the knot range."""


class InvalidRefinementError(ShellOptError, ValueError):
    pass


class SingularGeometryError(ShellOptError):
    """Degenerate surface metric (A_1 x A_2 = 0) at an evaluation point."""

    def __init__(self, message, element=None):
        super().__init__(message)
        self.element = element


class SingularFitError(ShellOptError):
    pass


class EmbeddingError(ShellOptError, ValueError):
    pass


class InfeasibleConstraintError(ShellOptError, ValueError):
    pass


class IntersectionTraceError(ShellOptError):
    pass


class TangentialIntersectionError(ShellOptError):
    pass


class SetupError(ShellOptError, ValueError):
    pass


class NonConvergenceError(ShellOptError):
    """An iterative solve ran out of iterations or diverged.

    ``history`` carries the residual norms (or the worst residual block for
    intersection solves) so callers can report what went wrong.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class FactorizationError(ShellOptError):
    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class QPInfeasibleError(ShellOptError):
    pass


class ComponentError(ShellOptError):
    """Failure inside a graph component; the component name is attached."""

    def __init__(self, component, cause):
        super().__init__(f"component '{component}': {cause}")
        self.component = component
        self.cause = cause


class DocumentError(ShellOptError, ValueError):
    """Malformed geometry/problem document. ``pointer`` is a JSON pointer."""

    def __init__(self, message, pointer=""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer
