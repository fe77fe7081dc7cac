"""
Error hierarchy for the adaptive solver.

Library code raises these; main.run() converts them into result dicts
with an exit code, the way the pipeline entry point always has.
"""


class BilinearAfemError(Exception):
    """Base class for every error raised by the package."""


class MeshError(BilinearAfemError, ValueError):
    """Corrupted or non-conforming mesh, or a bisection that ran away."""


class QuadratureError(BilinearAfemError, ValueError):
    """Requested quadrature degree is not available."""


class AdmissibilityError(BilinearAfemError, ValueError):
    """Problem data or reaction coefficient outside the admissible range."""


class SchemeError(BilinearAfemError, ValueError):
    """Operation not defined for the requested discretization scheme."""


class ConfigError(BilinearAfemError, ValueError):
    """Invalid run configuration."""


class SolverError(BilinearAfemError, RuntimeError):
    """
    Linear solver did not reach its tolerance.

    Attributes:
        residual: relative residual achieved
        iterations: iterations spent
    """

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class NewtonDivergenceError(SolverError):
    """
    Semi-smooth Newton iteration did not converge.

    Attributes:
        last_iterate: the solution object of the last accepted iterate
        history: list of KKT residuals, one per iteration
        records: LoopRecords completed before the failure (set by the
            adaptive loop)
    """

    def __init__(self, message, last_iterate=None, history=None, records=None):
        history = list(history or [])
        super().__init__(message, residual=history[-1] if history else None,
                         iterations=len(history))
        self.last_iterate = last_iterate
        self.history = history
        self.records = list(records or [])


class VerificationError(BilinearAfemError, AssertionError):
    """
    A manufactured-solution check failed.

    Attributes:
        point: (x, y) where the check failed
        quantity: name of the quantity that failed
    """

    def __init__(self, message, point=None, quantity=None):
        super().__init__(message)
        self.point = point
        self.quantity = quantity
