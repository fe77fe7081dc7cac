"""
Bilinear optimal control: problem data, box projection and Newton solvers

The control enters the state equation as a reaction coefficient:

    -div grad y + u y = f,   -div grad p + u p = y - y_omega,
    u = Pi_[a,b](y p / alpha).

Two discretizations share one semi-smooth Newton driver:

- fully discrete: P1 state/adjoint, P0 control u_T = Pi(mean_T(y p) / alpha)
- semi-discrete (variational discretization): the control is never
  discretized; u(x) = Pi(y(x) p(x) / alpha) is evaluated at quadrature points

The iteration runs on (y, p) only; the control is always recomputed from
the current pair through the projection formula.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, gmres

from . import fem
from .exceptions import AdmissibilityError, NewtonDivergenceError, SchemeError, SolverError
from .mesh import prolong_p0, prolong_p1
from .quadrature import DEFAULT_DEGREE, element_weights, evaluate_field, quad_rule

logger = logging.getLogger(__name__)

NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 100
MAX_HALVINGS = 10
LINEAR_RTOL = 1e-11
GMRES_RESTART = 40

SCHEMES = ('fully', 'semi')


# ----------------------------------------------------------------------
# Problem data and projection
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class ProblemData:
    """
    Data of the control problem.

    Attributes:
        f: source term, g(x, y) -> array (or a scalar)
        y_omega: desired state, g(x, y) -> array (or a scalar)
        alpha: regularization parameter, > 0
        a, b: control bounds, 0 < a < b
    """
    f: object
    y_omega: object
    alpha: float
    a: float
    b: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise AdmissibilityError(f"alpha must be positive, got {self.alpha}")
        if not 0 < self.a < self.b:
            raise AdmissibilityError(f"Control bounds must satisfy 0 < a < b, got a={self.a}, b={self.b}")


def project_box(v, a, b):
    """
    Pointwise projection min(b, max(v, a)).

    Works on scalars and arrays alike.

    Raises:
        AdmissibilityError: if a >= b
    """
    if not a < b:
        raise AdmissibilityError(f"Projection needs a < b, got [{a}, {b}]")
    clipped = np.minimum(b, np.maximum(v, a))
    return float(clipped) if np.ndim(clipped) == 0 else clipped


def control_semi(y, p, data, point, element):
    """
    Implicit control of the variational discretization at one point.

    Args:
        y, p: P1 FeFunctions
        data: ProblemData
        point: (x, y) inside `element`
        element: element id

    Returns:
        float: Pi_[a,b](y(point) p(point) / alpha)
    """
    y_val, _ = fem.eval_p1(y.space, y, element, point)
    p_val, _ = fem.eval_p1(p.space, p, element, point)
    return project_box(y_val * p_val / data.alpha, data.a, data.b)


class SemiControl:
    """
    Element-evaluable control u(x) = Pi(y(x) p(x) / alpha).

    Instances can be passed anywhere a reaction coefficient is expected.
    """

    def __init__(self, y_nodal, p_nodal, data):
        self.y_nodal = np.asarray(y_nodal, dtype=float)
        self.p_nodal = np.asarray(p_nodal, dtype=float)
        self.data = data

    def unprojected(self, mesh, rule):
        yq = fem.p1_at_quadrature(mesh, self.y_nodal, rule)
        pq = fem.p1_at_quadrature(mesh, self.p_nodal, rule)
        return yq * pq / self.data.alpha

    def __call__(self, mesh, rule):
        return project_box(self.unprojected(mesh, rule), self.data.a, self.data.b)


def cell_means_of_product(mesh, y_nodal, p_nodal, rule=None):
    """
    |T|^-1 (y p, 1)_T for P1 nodal vectors.

    Computed exactly from the P1 mass matrix unless a quadrature rule is
    given.
    """
    if rule is None:
        ye = fem.p1_element_values(mesh, y_nodal)
        pe = fem.p1_element_values(mesh, p_nodal)
        return np.einsum('ei,ij,ej->e', ye, fem.P1_MASS, pe)
    yq = fem.p1_at_quadrature(mesh, y_nodal, rule)
    pq = fem.p1_at_quadrature(mesh, p_nodal, rule)
    return fem.element_means(mesh, yq * pq, rule)


def control_fully(y, p, data, mesh=None, rule=None):
    """
    Piecewise constant control from the discrete variational inequality.

    u_T = Pi_[a,b]((alpha |T|)^-1 (y p, 1)_T)

    Args:
        y, p: P1 FeFunctions
        data: ProblemData
        mesh: Mesh (defaults to the mesh of y)
        rule: optional QuadRule for the cell means (exact otherwise)

    Returns:
        FeFunction: P0 control
    """
    mesh = mesh or y.mesh
    means = cell_means_of_product(mesh, y.nodal_values(), p.nodal_values(), rule)
    return fem.FeFunction(fem.P0Space(mesh), project_box(means / data.alpha, data.a, data.b))


def cost(y, u, data, rule=None):
    """
    J(y, u) = 1/2 ||y - y_omega||^2 + alpha/2 ||u||^2.

    Args:
        y: P1 FeFunction
        u: control as P0 FeFunction, scalar, or element-evaluable callable
        data: ProblemData
        rule: QuadRule (default degree 19)
    """
    mesh = y.mesh
    rule = rule or quad_rule(DEFAULT_DEGREE)
    w = element_weights(mesh, rule)
    misfit = fem.p1_at_quadrature(mesh, y.nodal_values(), rule) - evaluate_field(data.y_omega, mesh, rule)
    uq = fem.coefficient_values(u, mesh, rule)
    return float(0.5 * np.sum(w * misfit ** 2) + 0.5 * data.alpha * np.sum(w * uq ** 2))


# ----------------------------------------------------------------------
# Solutions
# ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FullySolution:
    """Discrete optimal triple of the fully discrete scheme."""
    y: fem.FeFunction
    p: fem.FeFunction
    u: fem.FeFunction
    newton_iters: int
    kkt_residual: float
    history: tuple = field(default=(), repr=False)
    data: ProblemData = field(default=None, repr=False)

    scheme = 'fully'

    @property
    def mesh(self):
        return self.y.mesh

    def control_coefficient(self):
        return self.u


@dataclass(frozen=True, eq=False)
class SemiSolution:
    """Discrete state and adjoint of the variational discretization."""
    y: fem.FeFunction
    p: fem.FeFunction
    newton_iters: int
    kkt_residual: float
    history: tuple = field(default=(), repr=False)
    data: ProblemData = field(default=None, repr=False)

    scheme = 'semi'

    @property
    def mesh(self):
        return self.y.mesh

    def control_coefficient(self):
        return SemiControl(self.y.nodal_values(), self.p.nodal_values(), self.data)


def transfer(solution, new_mesh):
    """
    Carry a solution to a refinement of its mesh (warm start).

    P1 values prolong by edge-midpoint averaging, P0 values are copied from
    the ancestor element.

    Raises:
        MeshError: if new_mesh is not one refine() step away from the
            solution's mesh
    """
    old_mesh = solution.mesh
    space = fem.P1Space(new_mesh)
    y = fem.FeFunction.from_nodal(space, prolong_p1(old_mesh, new_mesh, solution.y.nodal_values()))
    p = fem.FeFunction.from_nodal(space, prolong_p1(old_mesh, new_mesh, solution.p.nodal_values()))
    if solution.scheme == 'fully':
        u = fem.FeFunction(fem.P0Space(new_mesh), prolong_p0(old_mesh, new_mesh, solution.u.coefficients))
        return FullySolution(y, p, u, 0, np.inf, data=solution.data)
    return SemiSolution(y, p, 0, np.inf, data=solution.data)


# ----------------------------------------------------------------------
# Scheme-specific pieces of the Newton system
# ----------------------------------------------------------------------

class _FullyScheme:
    """Control u_T from exact cell means of y p; Jacobian terms are rank one per element."""

    name = 'fully'

    def __init__(self, mesh, data, rule):
        self.mesh = mesh
        self.data = data
        self.rule = rule

    def control(self, yn, pn):
        z = cell_means_of_product(self.mesh, yn, pn) / self.data.alpha
        return project_box(z, self.data.a, self.data.b), (z > self.data.a) & (z < self.data.b)

    def reaction_local(self, u):
        return fem.local_mass(self.mesh, u)

    def jacobian_local(self, yn, pn, inactive):
        mesh = self.mesh
        mass = mesh.areas[:, None, None] * fem.P1_MASS
        my = np.einsum('eij,ej->ei', mass, fem.p1_element_values(mesh, yn))
        mp = np.einsum('eij,ej->ei', mass, fem.p1_element_values(mesh, pn))
        s = inactive / (self.data.alpha * mesh.areas)
        outer = lambda v, w: s[:, None, None] * v[:, :, None] * w[:, None, :]
        return outer(my, mp), outer(my, my), outer(mp, mp), outer(mp, my)


class _SemiScheme:
    """Control u(x) at quadrature points; Jacobian terms are weighted mass matrices."""

    name = 'semi'

    def __init__(self, mesh, data, rule):
        self.mesh = mesh
        self.data = data
        self.rule = rule

    def control(self, yn, pn):
        z = SemiControl(yn, pn, self.data).unprojected(self.mesh, self.rule)
        return project_box(z, self.data.a, self.data.b), (z > self.data.a) & (z < self.data.b)

    def reaction_local(self, u):
        return fem.local_weighted_mass(self.mesh, u, self.rule)

    def jacobian_local(self, yn, pn, inactive):
        mesh, rule, alpha = self.mesh, self.rule, self.data.alpha
        yq = fem.p1_at_quadrature(mesh, yn, rule)
        pq = fem.p1_at_quadrature(mesh, pn, rule)
        chi = inactive / alpha
        yp = fem.local_weighted_mass(mesh, chi * yq * pq, rule)
        yy = fem.local_weighted_mass(mesh, chi * yq * yq, rule)
        pp = fem.local_weighted_mass(mesh, chi * pq * pq, rule)
        return yp, yy, pp, yp


class _NewtonSystem:
    """
    Reduced optimality system F(y, p) = 0 over the free dofs.

        F1 = A(u) y - (f, .)
        F2 = A(u) p - M y + (y_omega, .)

    with A(u) = stiffness + u-weighted mass and u = u(y, p).
    """

    def __init__(self, mesh, data, scheme, rule):
        self.mesh = mesh
        self.space = fem.P1Space(mesh)
        self.data = data
        self.rule = rule
        self.scheme = {'fully': _FullyScheme, 'semi': _SemiScheme}[scheme](mesh, data, rule)
        self.stiffness_local = fem.local_stiffness(mesh)
        self.mass = fem.assemble_mass(self.space)
        self.b_f = fem.assemble_rhs(self.space, data.f, rule)
        self.b_yd = fem.assemble_rhs(self.space, data.y_omega, rule)
        scale = max(np.linalg.norm(self.b_f), np.linalg.norm(self.b_yd))
        self.scale = scale if scale > 0.0 else 1.0
        self.n = self.space.n_free_dofs

    def nodal(self, coeffs):
        values = np.zeros(self.mesh.n_vertices)
        values[self.space.free_vertices] = coeffs
        return values

    def operator(self, u):
        local = self.stiffness_local + self.scheme.reaction_local(u)
        return fem.restrict(self.space, fem.assemble_matrix(self.mesh, local))

    def evaluate(self, x):
        """Residual pieces at x = [y; p]."""
        y, p = x[:self.n], x[self.n:]
        yn, pn = self.nodal(y), self.nodal(p)
        u, inactive = self.scheme.control(yn, pn)
        A = self.operator(u)
        F1 = A @ y - self.b_f
        F2 = A @ p - self.mass @ y + self.b_yd
        kkt = max(np.linalg.norm(F1), np.linalg.norm(F2)) / self.scale
        return {'F': np.concatenate([F1, F2]), 'A': A, 'u': u, 'inactive': inactive,
                'yn': yn, 'pn': pn, 'kkt': kkt}

    def jacobian(self, state):
        e11, e12, e21, e22 = self.scheme.jacobian_local(state['yn'], state['pn'], state['inactive'])
        block = lambda local: fem.restrict(self.space, fem.assemble_matrix(self.mesh, local))
        A = state['A']
        return sp.bmat([[A + block(e11), block(e12)],
                        [block(e21) - self.mass, A + block(e22)]], format='csr'), block(e21) - self.mass

    def newton_step(self, state):
        """
        Solve J dx = -F.

        GMRES on the full Jacobian, preconditioned by one block Gauss-Seidel
        sweep whose diagonal blocks are the SPD operator A(u).
        """
        n = self.n
        J, J21 = self.jacobian(state)
        A = state['A']

        def sweep(r):
            dy = fem.solve_spd(A, r[:n])
            dp = fem.solve_spd(A, r[n:] - J21 @ dy)
            return np.concatenate([dy, dp])

        M = LinearOperator((2 * n, 2 * n), matvec=sweep, dtype=float)
        rhs = -state['F']
        dx, info = gmres(J, rhs, rtol=LINEAR_RTOL, atol=0.0, restart=GMRES_RESTART,
                         maxiter=20, M=M)
        if info != 0:
            relres = np.linalg.norm(J @ dx - rhs) / max(np.linalg.norm(rhs), 1e-300)
            logger.warning("Newton linear solve stopped early (info=%d, relres=%.2e)", info, relres)
        return dx


def _initial_guess(system):
    """u0 = (a+b)/2, then one state and one adjoint solve."""
    data = system.data
    u0 = 0.5 * (data.a + data.b)
    A = system.operator(np.full(system.mesh.n_elements, u0) if system.scheme.name == 'fully'
                        else np.full((system.mesh.n_elements, system.rule.n_points), u0))
    y = fem.solve_spd(A, system.b_f)
    p = fem.solve_spd(A, system.mass @ y - system.b_yd)
    return np.concatenate([y, p])


def _package(system, x, state, iters, history):
    space = system.space
    y = fem.FeFunction(space, x[:system.n])
    p = fem.FeFunction(space, x[system.n:])
    if system.scheme.name == 'fully':
        u = fem.FeFunction(fem.P0Space(system.mesh), state['u'])
        return FullySolution(y, p, u, iters, state['kkt'], tuple(history), system.data)
    return SemiSolution(y, p, iters, state['kkt'], tuple(history), system.data)


def _solve(mesh, data, scheme, init, rule, tol, max_iter):
    if scheme not in SCHEMES:
        raise SchemeError(f"Unknown scheme '{scheme}', expected one of {SCHEMES}")
    rule = rule or quad_rule(DEFAULT_DEGREE)
    started = time.perf_counter()
    system = _NewtonSystem(mesh, data, scheme, rule)

    if init is not None:
        if init.mesh is not mesh:
            init = transfer(init, mesh)
        x = np.concatenate([init.y.coefficients, init.p.coefficients])
    else:
        x = _initial_guess(system)

    state = system.evaluate(x)
    history = [state['kkt']]
    logger.info("%s Newton: %d dofs per field, initial KKT residual %.3e", scheme, system.n, state['kkt'])

    iters = 0
    while state['kkt'] > tol:
        if iters >= max_iter:
            raise NewtonDivergenceError(
                f"{scheme} Newton did not converge in {max_iter} iterations "
                f"(KKT residual {state['kkt']:.3e})",
                last_iterate=_package(system, x, state, iters, history), history=history)
        try:
            dx = system.newton_step(state)
        except SolverError as exc:
            raise NewtonDivergenceError(f"{scheme} Newton linear solve failed: {exc}",
                                        last_iterate=_package(system, x, state, iters, history),
                                        history=history) from exc

        step = 1.0
        trial_x = x + dx
        trial = system.evaluate(trial_x)
        halvings = 0
        while not trial['kkt'] < state['kkt'] and halvings < MAX_HALVINGS:
            step *= 0.5
            halvings += 1
            trial_x = x + step * dx
            trial = system.evaluate(trial_x)
        if halvings:
            logger.debug("Newton iteration %d damped by %g", iters + 1, step)
        if not trial['kkt'] < state['kkt']:
            logger.warning("Newton iteration %d: no decrease after %d halvings (%.3e -> %.3e)",
                           iters + 1, MAX_HALVINGS, state['kkt'], trial['kkt'])

        x, state = trial_x, trial
        iters += 1
        history.append(state['kkt'])
        logger.info("  iteration %d: KKT residual %.3e, step %g, active fraction %.3f",
                    iters, state['kkt'], step, 1.0 - float(np.mean(state['inactive'])))

    logger.info("%s Newton converged in %d iterations (%.2f s)", scheme, iters, time.perf_counter() - started)
    return _package(system, x, state, iters, history)


def solve_fully(mesh, data, init=None, rule=None, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER):
    """
    Semi-smooth Newton solve of the fully discrete optimality system.

    Args:
        mesh: conforming Mesh
        data: ProblemData
        init: optional FullySolution (on this mesh or on its parent mesh)
        rule: QuadRule for loads (default degree 19)
        tol: KKT residual target
        max_iter: iteration cap

    Returns:
        FullySolution

    Raises:
        NewtonDivergenceError: with the last iterate and residual history
    """
    return _solve(mesh, data, 'fully', init, rule, tol, max_iter)


def solve_semi(mesh, data, init=None, rule=None, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER):
    """
    Semi-smooth Newton solve of the variational discretization.

    The reaction term (u y, v) with u(x) = Pi(y(x) p(x) / alpha) is
    integrated with `rule` (default degree 19), kinks of u included.

    Returns:
        SemiSolution

    Raises:
        NewtonDivergenceError: with the last iterate and residual history
    """
    return _solve(mesh, data, 'semi', init, rule, tol, max_iter)


def solve(scheme, mesh, data, init=None, rule=None, tol=NEWTON_TOL, max_iter=NEWTON_MAX_ITER):
    """Dispatch to solve_fully / solve_semi."""
    return _solve(mesh, data, scheme, init, rule, tol, max_iter)


def kkt_report(solution, rule=None):
    """
    Recompute the optimality residuals of a returned solution.

    Returns:
        dict with 'state', 'adjoint' (relative algebraic residuals) and
        'control' (L2 distance between the stored control and the
        projection formula; 0 for the semi scheme by construction)
    """
    mesh, data = solution.mesh, solution.data
    rule = rule or quad_rule(DEFAULT_DEGREE)
    system = _NewtonSystem(mesh, data, solution.scheme, rule)
    x = np.concatenate([solution.y.coefficients, solution.p.coefficients])
    state = system.evaluate(x)
    n = system.n
    report = {
        'state': float(np.linalg.norm(state['F'][:n]) / system.scale),
        'adjoint': float(np.linalg.norm(state['F'][n:]) / system.scale),
        'control': 0.0,
    }
    if solution.scheme == 'fully':
        recomputed = control_fully(solution.y, solution.p, data)
        diff = solution.u.coefficients - recomputed.coefficients
        report['control'] = float(np.sqrt(np.sum(mesh.areas * diff ** 2)))
    return report
