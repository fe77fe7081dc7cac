"""
Manufactured benchmark cases

A case fixes the optimal state and adjoint first; the control, the source
and the desired state follow from the optimality system:

    u = Pi_[a,b](y p / alpha),  f = -lap y + u y,  y_omega = y + lap p - u p.

Every field is a vectorized callable of (x, y). verify_case() checks the
analytic derivatives against finite differences before a case is trusted
for error reporting.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.stats import qmc

from . import fem
from .exceptions import ConfigError, VerificationError
from .mesh import build_lshape
from .ocp import ProblemData, project_box
from .quadrature import DEFAULT_DEGREE, element_weights, evaluate_field, quad_rule

logger = logging.getLogger(__name__)

# Example 1 parameters
ALPHA = 0.1
LOWER = 0.01
UPPER = 5.0

# Finite-difference oracle
GRADIENT_STEP = 1e-5
GRADIENT_RTOL = 1e-6
LAPLACIAN_STEP = 1e-4
LAPLACIAN_RTOL = 1e-4
CONSISTENCY_ATOL = 1e-8
BOUNDARY_ATOL = 1e-10
MIN_RADIUS = 0.1
STENCIL_MARGIN = 1e-3

HALF_PI = 0.5 * math.pi


# ----------------------------------------------------------------------
# The corner singularity
# ----------------------------------------------------------------------

def polar(x, y):
    """(rho, omega) with omega in [0, 2 pi); the L-shape covers [0, 3 pi / 2]."""
    rho = np.hypot(x, y)
    omega = np.arctan2(y, x)
    omega = np.where(omega < 0.0, omega + 2.0 * math.pi, omega)
    return rho, omega


def singular_factor(x, y):
    """s = rho^(2/3) sin(2 omega / 3), harmonic away from the corner."""
    rho, omega = polar(x, y)
    return rho ** (2.0 / 3.0) * np.sin(2.0 * omega / 3.0)


def singular_gradient(x, y):
    """
    grad s = (2/3) rho^(-1/3) (-sin(omega/3), cos(omega/3)).

    Returns 0 at the corner itself.
    """
    rho, omega = polar(x, y)
    safe = np.where(rho > 0.0, rho, 1.0)
    scale = np.where(rho > 0.0, (2.0 / 3.0) * safe ** (-1.0 / 3.0), 0.0)
    return np.stack([-scale * np.sin(omega / 3.0), scale * np.cos(omega / 3.0)], axis=-1)


# ----------------------------------------------------------------------
# Cases
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class ManufacturedCase:
    """
    Exact optimal state and adjoint with everything derived from them.

    Attributes:
        name: example name used on the command line
        y, p: exact state and adjoint
        grad_y, grad_p: their gradients, trailing axis of length 2
        lap_y, lap_p: their Laplacians
        alpha, a, b: regularization and control bounds
        build_mesh: levels -> initial Mesh of the domain
        contains: (x, y, margin) -> mask of points at least `margin`
            inside the domain
        boundary_points: n -> (n, 2) points on the boundary
    """
    name: str
    y: Callable
    grad_y: Callable
    lap_y: Callable
    p: Callable
    grad_p: Callable
    lap_p: Callable
    alpha: float
    a: float
    b: float
    build_mesh: Callable = field(repr=False, default=None)
    contains: Callable = field(repr=False, default=None)
    boundary_points: Callable = field(repr=False, default=None)

    def u(self, x, y):
        """Exact control Pi_[a,b](y p / alpha), evaluated pointwise."""
        return project_box(self.y(x, y) * self.p(x, y) / self.alpha, self.a, self.b)

    def f(self, x, y):
        return -self.lap_y(x, y) + self.u(x, y) * self.y(x, y)

    def y_omega(self, x, y):
        return self.y(x, y) + self.lap_p(x, y) - self.u(x, y) * self.p(x, y)

    @property
    def problem_data(self):
        return ProblemData(f=self.f, y_omega=self.y_omega, alpha=self.alpha, a=self.a, b=self.b)


def _product_with_singular(phi, grad_phi, lap_phi):
    """Value, gradient and Laplacian of phi * s, using lap s = 0."""

    def value(x, y):
        return phi(x, y) * singular_factor(x, y)

    def gradient(x, y):
        return (grad_phi(x, y) * singular_factor(x, y)[..., None]
                + phi(x, y)[..., None] * singular_gradient(x, y))

    def laplacian(x, y):
        cross = np.sum(grad_phi(x, y) * singular_gradient(x, y), axis=-1)
        return lap_phi(x, y) * singular_factor(x, y) + 2.0 * cross

    return value, gradient, laplacian


def _shifted_sine(t):
    return np.sin(HALF_PI * (t + 1.0))


def _shifted_sine_prime(t):
    return HALF_PI * np.cos(HALF_PI * (t + 1.0))


def _state_smooth_factor():
    # 3 sin(pi (y+1)/2) sin(pi (x+1)/2)
    def phi(x, y):
        return 3.0 * _shifted_sine(x) * _shifted_sine(y)

    def grad(x, y):
        return np.stack([3.0 * _shifted_sine_prime(x) * _shifted_sine(y),
                         3.0 * _shifted_sine(x) * _shifted_sine_prime(y)], axis=-1)

    def lap(x, y):
        return -2.0 * HALF_PI ** 2 * phi(x, y)

    return phi, grad, lap


def _adjoint_smooth_factor():
    # 2 cos(pi y/2) sin(pi (x+1)/2)
    def phi(x, y):
        return 2.0 * np.cos(HALF_PI * y) * _shifted_sine(x)

    def grad(x, y):
        return np.stack([2.0 * np.cos(HALF_PI * y) * _shifted_sine_prime(x),
                         -2.0 * HALF_PI * np.sin(HALF_PI * y) * _shifted_sine(x)], axis=-1)

    def lap(x, y):
        return -2.0 * HALF_PI ** 2 * phi(x, y)

    return phi, grad, lap


def lshape_contains(x, y, margin=0.0):
    """Points of (-1,1)^2 minus [0,1)x(-1,0], at least `margin` from the boundary."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    inside_square = (np.abs(x) < 1.0 - margin) & (np.abs(y) < 1.0 - margin)
    in_notch = (x > -margin) & (y < margin)
    return inside_square & ~in_notch


def lshape_boundary_points(n):
    """n points spread over the six boundary segments of the L-shape."""
    corners = np.array([(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (-1.0, 1.0),
                        (-1.0, -1.0), (0.0, -1.0), (0.0, 0.0)])
    lengths = np.linalg.norm(np.diff(corners, axis=0), axis=1)
    arclength = np.linspace(0.0, lengths.sum(), n, endpoint=False)
    cumulative = np.concatenate([[0.0], np.cumsum(lengths)])
    segment = np.clip(np.searchsorted(cumulative, arclength, side='right') - 1, 0, len(lengths) - 1)
    local = (arclength - cumulative[segment]) / lengths[segment]
    start, end = corners[segment], corners[segment + 1]
    return start + local[:, None] * (end - start)


def example1():
    """
    L-shape benchmark with a corner singularity in state and adjoint.

    y = 3 sin(pi (y+1)/2) sin(pi (x+1)/2) s,
    p = 2 cos(pi y/2) sin(pi (x+1)/2) s,   s = rho^(2/3) sin(2 omega/3),

    with alpha = 0.1 and bounds [0.01, 5].
    """
    y, grad_y, lap_y = _product_with_singular(*_state_smooth_factor())
    p, grad_p, lap_p = _product_with_singular(*_adjoint_smooth_factor())
    return ManufacturedCase(
        name='lshape', y=y, grad_y=grad_y, lap_y=lap_y, p=p, grad_p=grad_p, lap_p=lap_p,
        alpha=ALPHA, a=LOWER, b=UPPER,
        build_mesh=build_lshape, contains=lshape_contains, boundary_points=lshape_boundary_points,
    )


EXAMPLES = {'lshape': example1}


def get_case(name):
    """
    Look up a benchmark case by name.

    Raises:
        ConfigError: for unknown names; the three-dimensional cube example
            is out of scope for this two-dimensional solver
    """
    if name == 'cube':
        raise ConfigError("Example 'cube' is three-dimensional; only 2D examples are supported "
                          f"(available: {', '.join(EXAMPLES)})")
    if name not in EXAMPLES:
        raise ConfigError(f"Unknown example '{name}' (available: {', '.join(EXAMPLES)})")
    return EXAMPLES[name]()


# ----------------------------------------------------------------------
# Verification oracle
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class VerificationReport:
    """Worst discrepancies found by verify_case (all within tolerance)."""
    n_points: int
    gradient_error: float
    laplacian_error: float
    consistency_error: float
    boundary_error: float
    control_in_bounds: bool = True


def sample_points(case, n_points=128, min_radius=MIN_RADIUS, margin=STENCIL_MARGIN):
    """
    Deterministic quasi-random interior points away from the corner.

    Halton points in [-1,1]^2, keeping those inside the domain with
    rho > min_radius and room for the finite-difference stencils.
    """
    sampler = qmc.Halton(d=2, scramble=False)
    accepted = np.empty((0, 2))
    while len(accepted) < n_points:
        candidates = 2.0 * sampler.random(4 * n_points) - 1.0
        x, y = candidates[:, 0], candidates[:, 1]
        keep = case.contains(x, y, margin) & (np.hypot(x, y) > min_radius)
        accepted = np.vstack([accepted, candidates[keep]])
    return accepted[:n_points]


def _central_gradient(func, x, y, h):
    gx = (func(x + h, y) - func(x - h, y)) / (2.0 * h)
    gy = (func(x, y + h) - func(x, y - h)) / (2.0 * h)
    return np.stack([gx, gy], axis=-1)


def _five_point_laplacian(func, x, y, h):
    return (func(x + h, y) + func(x - h, y) + func(x, y + h) + func(x, y - h) - 4.0 * func(x, y)) / h ** 2


def _first_failure(errors, tol, points, quantity):
    bad = np.flatnonzero(errors > tol)
    if bad.size:
        i = int(bad[0])
        point = (float(points[i, 0]), float(points[i, 1]))
        raise VerificationError(
            f"{quantity} check failed at ({point[0]:.6f}, {point[1]:.6f}): "
            f"discrepancy {errors[i]:.3e} exceeds {tol:.1e}", point=point, quantity=quantity)


def verify_case(case, n_points=128):
    """
    Check a manufactured case against finite differences.

    At n_points interior points with rho > 0.1: analytic gradients vs
    central differences (h = 1e-5, relative 1e-6), analytic Laplacians vs
    the five-point stencil (h = 1e-4, relative 1e-4), and the identity
    -lap y + u y = f (absolute 1e-8). Boundary values of y and p must
    vanish and u must stay inside [a, b].

    Returns:
        VerificationReport

    Raises:
        VerificationError: naming the first failing point and quantity
    """
    pts = sample_points(case, n_points)
    x, y = pts[:, 0], pts[:, 1]

    gradient_error = 0.0
    laplacian_error = 0.0
    for label, value, grad, lap in (('y', case.y, case.grad_y, case.lap_y),
                                    ('p', case.p, case.grad_p, case.lap_p)):
        exact_grad = grad(x, y)
        fd_grad = _central_gradient(value, x, y, GRADIENT_STEP)
        scale = np.maximum(np.linalg.norm(exact_grad, axis=-1), 1.0)
        errors = np.linalg.norm(fd_grad - exact_grad, axis=-1) / scale
        _first_failure(errors, GRADIENT_RTOL, pts, f"gradient of {label}")
        gradient_error = max(gradient_error, float(errors.max()))

        exact_lap = lap(x, y)
        fd_lap = _five_point_laplacian(value, x, y, LAPLACIAN_STEP)
        errors = np.abs(fd_lap - exact_lap) / np.maximum(np.abs(exact_lap), 1.0)
        _first_failure(errors, LAPLACIAN_RTOL, pts, f"Laplacian of {label}")
        laplacian_error = max(laplacian_error, float(errors.max()))

    residual = np.abs(-case.lap_y(x, y) + case.u(x, y) * case.y(x, y) - case.f(x, y))
    _first_failure(residual, CONSISTENCY_ATOL, pts, "state equation consistency")

    boundary = case.boundary_points(200)
    bx, by = boundary[:, 0], boundary[:, 1]
    boundary_values = np.maximum(np.abs(case.y(bx, by)), np.abs(case.p(bx, by)))
    _first_failure(boundary_values, BOUNDARY_ATOL, boundary, "boundary value")

    u = case.u(x, y)
    outside = np.maximum(case.a - u, u - case.b)
    _first_failure(outside, 0.0, pts, "control bounds")

    report = VerificationReport(
        n_points=len(pts),
        gradient_error=gradient_error,
        laplacian_error=laplacian_error,
        consistency_error=float(residual.max()),
        boundary_error=float(boundary_values.max()),
    )
    logger.info("Case '%s' verified at %d points (gradient %.2e, Laplacian %.2e)",
                case.name, report.n_points, gradient_error, laplacian_error)
    return report


def corrupt_gradient(case, offset=1e-3):
    """Copy of a case with a shifted state gradient, for negative controls."""
    grad_y = case.grad_y
    return replace(case, grad_y=lambda x, y: grad_y(x, y) + offset)


# ----------------------------------------------------------------------
# Diagnostics
# ----------------------------------------------------------------------

def diagnostic_assumption(case, solution, rule=None):
    """
    ||y p - y_h p_h||_L2 over the domain.

    The analysis asks this product error to be small compared with
    alpha times the curvature constant of the local minimum; the constant
    is not computable, so only the value is returned.
    """
    mesh = solution.mesh
    rule = rule or quad_rule(DEFAULT_DEGREE)
    exact = evaluate_field(lambda x, y: case.y(x, y) * case.p(x, y), mesh, rule)
    discrete = (fem.p1_at_quadrature(mesh, solution.y.nodal_values(), rule)
                * fem.p1_at_quadrature(mesh, solution.p.nodal_values(), rule))
    return math.sqrt(float(np.sum(element_weights(mesh, rule) * (exact - discrete) ** 2)))
