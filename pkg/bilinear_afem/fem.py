"""
P1/P0 finite element spaces, assembly and the SPD solver

The state and adjoint live in the continuous piecewise linear space with
homogeneous Dirichlet conditions (boundary vertices carry no dof); controls
of the fully discrete scheme live in the piecewise constant space.

Element-level work is vectorized over all elements with numpy and reduced
into scipy sparse matrices in element index order, so assembled results
are bit-reproducible.
"""

import logging
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg

from .exceptions import AdmissibilityError, MeshError, SolverError
from .quadrature import DEFAULT_DEGREE, element_weights, evaluate_field, quad_rule

logger = logging.getLogger(__name__)

CG_RTOL = 1e-12
CG_RESTARTS = 3
BARYCENTRIC_TOL = 1e-12

# Exact P1 mass matrix on a triangle, divided by |T|
P1_MASS = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


# ----------------------------------------------------------------------
# Spaces and functions
# ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class P1Space:
    """Continuous piecewise linears vanishing on the boundary."""
    mesh: object

    @cached_property
    def free_vertices(self):
        return np.flatnonzero(~self.mesh.boundary_vertex_mask)

    @cached_property
    def dof_of_vertex(self):
        """Vertex -> dof index, -1 on boundary vertices."""
        dofs = np.full(self.mesh.n_vertices, -1, dtype=np.int64)
        dofs[self.free_vertices] = np.arange(len(self.free_vertices))
        return dofs

    @property
    def n_free_dofs(self):
        return len(self.free_vertices)

    @property
    def dim(self):
        return self.n_free_dofs

    kind = 'P1'


@dataclass(frozen=True, eq=False)
class P0Space:
    """Piecewise constants, one dof per element."""
    mesh: object

    @property
    def dim(self):
        return self.mesh.n_elements

    kind = 'P0'


@dataclass(frozen=True, eq=False)
class FeFunction:
    """
    Coefficient vector over a P1 or P0 space.

    Attributes:
        space: P1Space or P0Space
        coefficients: one value per dof
    """
    space: object
    coefficients: np.ndarray

    def __post_init__(self):
        coefficients = np.array(self.coefficients, dtype=float)
        if coefficients.shape != (self.space.dim,):
            raise ValueError(f"{self.space.kind} function needs {self.space.dim} coefficients, "
                             f"got shape {coefficients.shape}")
        coefficients.setflags(write=False)
        object.__setattr__(self, 'coefficients', coefficients)

    @property
    def kind(self):
        return self.space.kind

    @property
    def mesh(self):
        return self.space.mesh

    def nodal_values(self):
        """Values at every mesh vertex (zero on the boundary)."""
        if self.kind != 'P1':
            raise TypeError("nodal_values() is only defined for P1 functions")
        values = np.zeros(self.mesh.n_vertices)
        values[self.space.free_vertices] = self.coefficients
        return values

    @classmethod
    def from_nodal(cls, space, nodal):
        """Restrict vertex values to the free dofs of `space`."""
        return cls(space, np.asarray(nodal, dtype=float)[space.free_vertices])


def zero_function(space):
    return FeFunction(space, np.zeros(space.dim))


def interpolate_p1(space, g):
    """Nodal interpolant of a point-evaluable field (boundary values dropped)."""
    xy = space.mesh.vertices[space.free_vertices]
    values = g(xy[:, 0], xy[:, 1]) if callable(g) else np.full(len(xy), float(g))
    return FeFunction(space, np.broadcast_to(np.asarray(values, dtype=float), (len(xy),)))


# ----------------------------------------------------------------------
# Evaluation helpers
# ----------------------------------------------------------------------

def p1_element_values(mesh, nodal):
    """(Ne, 3) nodal values per element."""
    return np.asarray(nodal)[mesh.elements]


def p1_at_quadrature(mesh, nodal, rule):
    """(Ne, nq) values of a P1 function at the quadrature points."""
    return p1_element_values(mesh, nodal) @ rule.barycentric.T


def p1_gradients(mesh, nodal):
    """(Ne, 2) elementwise constant gradients of a P1 function."""
    return np.einsum('ek,ekd->ed', p1_element_values(mesh, nodal), mesh.barycentric_gradients)


def as_nodal(mesh, func):
    if isinstance(func, FeFunction):
        return func.nodal_values()
    values = np.asarray(func, dtype=float)
    if values.shape != (mesh.n_vertices,):
        raise ValueError("Expected a P1 FeFunction or an array of vertex values")
    return values


def elementwise_values(coefficient, mesh):
    """
    Per-element values of an elementwise constant coefficient.

    Returns:
        np.ndarray of shape (Ne,), or None when the coefficient varies
        inside elements
    """
    if isinstance(coefficient, FeFunction):
        return coefficient.coefficients if coefficient.kind == 'P0' else None
    if callable(coefficient):
        return None
    values = np.asarray(coefficient, dtype=float)
    if values.ndim == 0:
        return np.full(mesh.n_elements, float(values))
    if values.shape == (mesh.n_elements,):
        return values
    return None


def coefficient_values(coefficient, mesh, rule):
    """
    Reaction coefficient at all quadrature points.

    Args:
        coefficient: scalar, P0 FeFunction, (Ne,) array, P1 FeFunction,
            (Ne, nq) array of values at `rule` points, or an
            element-evaluable callable c(mesh, rule) -> (Ne, nq)
        mesh: Mesh
        rule: QuadRule

    Returns:
        np.ndarray: (Ne, nq)
    """
    shape = (mesh.n_elements, rule.n_points)
    per_element = elementwise_values(coefficient, mesh)
    if per_element is not None:
        return np.repeat(per_element[:, None], rule.n_points, axis=1)
    if isinstance(coefficient, FeFunction):
        return p1_at_quadrature(mesh, coefficient.nodal_values(), rule)
    if callable(coefficient):
        return np.broadcast_to(np.asarray(coefficient(mesh, rule), dtype=float), shape)
    values = np.asarray(coefficient, dtype=float)
    if values.shape != shape:
        raise ValueError(f"Coefficient values must have shape {shape}, got {values.shape}")
    return values


def eval_p1(space, func, t, point):
    """
    Value and gradient of a P1 function at a point of element t.

    Args:
        space: P1Space
        func: P1 FeFunction
        t: element id
        point: (x, y) inside element t

    Returns:
        tuple: (value, gradient as (2,) array)

    Raises:
        MeshError: if the point lies outside the element
    """
    mesh = space.mesh
    coords = mesh.element_coords[t]
    T = np.column_stack([coords[1] - coords[0], coords[2] - coords[0]])
    lam12 = np.linalg.solve(T, np.asarray(point, dtype=float) - coords[0])
    lam = np.array([1.0 - lam12.sum(), lam12[0], lam12[1]])
    if lam.min() < -BARYCENTRIC_TOL or lam.max() > 1.0 + BARYCENTRIC_TOL:
        raise MeshError(f"Point {tuple(point)} is outside element {t} (barycentric {lam})")
    nodal = func.nodal_values()[mesh.elements[t]]
    value = float(lam @ nodal)
    gradient = nodal @ mesh.barycentric_gradients[t]
    return value, gradient


# ----------------------------------------------------------------------
# Assembly
# ----------------------------------------------------------------------

def local_stiffness(mesh):
    """(Ne, 3, 3) element stiffness matrices (grad phi_i, grad phi_j)_T."""
    G = mesh.barycentric_gradients
    K = np.einsum('eid,ejd->eij', G, G) * mesh.areas[:, None, None]
    return 0.5 * (K + K.transpose(0, 2, 1))


def local_mass(mesh, per_element=None):
    """(Ne, 3, 3) exact P1 mass matrices, optionally scaled per element."""
    scale = mesh.areas if per_element is None else mesh.areas * per_element
    return scale[:, None, None] * P1_MASS[None, :, :]


def local_weighted_mass(mesh, values, rule):
    """
    (Ne, 3, 3) matrices (c phi_i, phi_j)_T by quadrature.

    Args:
        values: (Ne, nq) coefficient at the quadrature points of `rule`
    """
    lam = rule.barycentric
    outer = lam[:, :, None] * lam[:, None, :]
    M = np.einsum('eq,qij->eij', element_weights(mesh, rule) * values, outer)
    return 0.5 * (M + M.transpose(0, 2, 1))


def assemble_matrix(mesh, local):
    """Sum (Ne, 3, 3) local matrices into an (Nv, Nv) CSR matrix."""
    rows = np.repeat(mesh.elements, 3, axis=1).ravel()
    cols = np.tile(mesh.elements, (1, 3)).ravel()
    n = mesh.n_vertices
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def assemble_vector(mesh, local):
    """Sum (Ne, 3) local vectors into an (Nv,) vector."""
    return np.bincount(mesh.elements.ravel(), weights=local.ravel(), minlength=mesh.n_vertices)


def restrict(space, matrix):
    """Eliminate boundary rows and columns."""
    free = space.free_vertices
    return matrix[free][:, free].tocsr()


def check_admissible_coefficient(values, lower=0.0):
    """
    Raise AdmissibilityError if the sampled coefficient is not > lower.

    Args:
        values: sampled coefficient values
        lower: strict lower bound (0 for the reaction term)
    """
    worst = float(np.min(values)) if np.size(values) else 1.0
    if not worst > lower:
        raise AdmissibilityError(f"Reaction coefficient must be positive; minimum sampled value is {worst:.6g}")


def reaction_local_matrices(mesh, coefficient, rule=None):
    """Local u-weighted mass matrices; exact for elementwise constant u."""
    per_element = elementwise_values(coefficient, mesh)
    if per_element is not None:
        return local_mass(mesh, per_element), per_element
    rule = rule or quad_rule(DEFAULT_DEGREE)
    values = coefficient_values(coefficient, mesh, rule)
    return local_weighted_mass(mesh, values, rule), values


def assemble_system(space, u, rule=None, check_admissible=True):
    """
    Matrix of (grad z, grad v) + (u z, v) over the free dofs.

    Args:
        space: P1Space
        u: reaction coefficient (see coefficient_values)
        rule: QuadRule for coefficients varying inside elements
            (default degree 19)
        check_admissible: verify u > 0 at the sampled points

    Returns:
        scipy.sparse.csr_matrix: symmetric positive definite matrix

    Raises:
        AdmissibilityError: if u is nonpositive somewhere it was sampled
    """
    mesh = space.mesh
    reaction, sampled = reaction_local_matrices(mesh, u, rule)
    if check_admissible:
        check_admissible_coefficient(sampled)
    local = local_stiffness(mesh) + reaction
    return restrict(space, assemble_matrix(mesh, local))


def assemble_mass(space):
    """Plain P1 mass matrix over the free dofs."""
    mesh = space.mesh
    return restrict(space, assemble_matrix(mesh, local_mass(mesh)))


def load_vector_local(mesh, values, rule):
    """(Ne, 3) local load vectors (g, phi_i)_T from values at quadrature points."""
    return (element_weights(mesh, rule) * values) @ rule.barycentric


def assemble_rhs(space, g, rule=None):
    """
    Load vector b_i = sum_T (g, phi_i)_T over the free dofs.

    Args:
        space: P1Space
        g: point-evaluable field g(x, y), a scalar, or (Ne, nq) values at
            the points of `rule`
        rule: QuadRule (default degree 19)

    Returns:
        np.ndarray: (n_free_dofs,)
    """
    mesh = space.mesh
    rule = rule or quad_rule(DEFAULT_DEGREE)
    if callable(g) or np.isscalar(g):
        values = evaluate_field(g, mesh, rule)
    else:
        values = np.asarray(g, dtype=float)
    full = assemble_vector(mesh, load_vector_local(mesh, values, rule))
    return full[space.free_vertices]


# ----------------------------------------------------------------------
# Linear solver
# ----------------------------------------------------------------------

def _iteration_cap(dim):
    return max(1, int(math.ceil(20.0 * math.sqrt(dim))))


def solve_spd(A, b, rtol=CG_RTOL, x0=None):
    """
    Jacobi-preconditioned conjugate gradients.

    The true residual is recomputed after every CG run; when recurrence
    drift leaves it above the tolerance, CG restarts from the current
    iterate (at most CG_RESTARTS times).

    Args:
        A: SPD sparse matrix
        b: right-hand side
        rtol: relative residual target ||Ax-b||/||b||
        x0: optional starting vector

    Returns:
        np.ndarray: solution

    Raises:
        SolverError: if the target is not met within the iteration cap
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    norm_b = np.linalg.norm(b)
    if norm_b == 0.0:
        return np.zeros(n)

    diagonal = A.diagonal()
    if np.any(diagonal <= 0.0):
        raise SolverError("Matrix has a nonpositive diagonal entry; it is not SPD")
    inv_diag = 1.0 / diagonal
    M = LinearOperator((n, n), matvec=lambda r: inv_diag * r, dtype=float)

    cap = _iteration_cap(n)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    spent = 0
    relres = np.inf
    for attempt in range(CG_RESTARTS + 1):
        counter = {'it': 0}

        def count(_xk):
            counter['it'] += 1

        x, _info = cg(A, b, x0=x, rtol=0.5 * rtol, atol=0.0, maxiter=max(1, cap - spent),
                      M=M, callback=count)
        spent += counter['it']
        relres = np.linalg.norm(b - A @ x) / norm_b
        if relres <= rtol:
            logger.debug("CG: n=%d, %d iterations, relres=%.3e", n, spent, relres)
            return x
        if spent >= cap:
            break
    raise SolverError(f"CG did not reach relative residual {rtol:.1e} within {cap} iterations "
                      f"(achieved {relres:.3e})", residual=relres, iterations=spent)


def single_equation_solve(space, coefficient, f, rule=None):
    """
    Galerkin solution of -div grad z + u z = f with z = 0 on the boundary.

    Args:
        space: P1Space
        coefficient: admissible reaction coefficient u
        f: source (point-evaluable, scalar, or (Ne, nq) values)
        rule: QuadRule for the load and varying coefficients

    Returns:
        FeFunction: P1 solution
    """
    A = assemble_system(space, coefficient, rule)
    b = assemble_rhs(space, f, rule)
    return FeFunction(space, solve_spd(A, b))


# ----------------------------------------------------------------------
# Jumps and projections
# ----------------------------------------------------------------------

def edge_jumps(mesh, func):
    """
    Normal-derivative jump across every edge.

    [[grad v . nu]] = nu+ . grad v|T+ + nu- . grad v|T-, with nu+- the
    outward normals of the two incident elements. Boundary edges get 0.

    Args:
        mesh: Mesh
        func: P1 FeFunction or (Nv,) nodal values

    Returns:
        np.ndarray: (E,) jumps
    """
    grads = p1_gradients(mesh, as_nodal(mesh, func))
    jumps = np.zeros(len(mesh.edges))
    interior = np.flatnonzero(mesh.interior_edge_mask)
    for slot in (0, 1):
        t = mesh.edge_elements[interior, slot]
        k = mesh.edge_local_index[interior, slot]
        jumps[interior] += np.einsum('ed,ed->e', mesh.outward_normals[t, k], grads[t])
    return jumps


def edge_jump(mesh, func, edge):
    """
    Jump of the normal derivative across one interior edge.

    Args:
        mesh: Mesh
        func: P1 FeFunction
        edge: vertex-pair key of the edge

    Raises:
        MeshError: for boundary edges
    """
    e = mesh.edge_index(edge)
    if not mesh.interior_edge_mask[e]:
        raise MeshError(f"Edge {tuple(edge)} lies on the boundary; jumps are defined on interior edges")
    grads = p1_gradients(mesh, as_nodal(mesh, func))
    total = 0.0
    for slot in (0, 1):
        t, k = mesh.edge_elements[e, slot], mesh.edge_local_index[e, slot]
        total += float(mesh.outward_normals[t, k] @ grads[t])
    return total


def element_means(mesh, values, rule):
    """(Ne,) means of (Ne, nq) quadrature values."""
    return values @ rule.weights


def p0_project(mesh, g, rule=None):
    """
    L2 projection onto piecewise constants (elementwise means).

    Args:
        mesh: Mesh
        g: point-evaluable field or scalar
        rule: QuadRule (default degree 19)

    Returns:
        FeFunction: P0 function
    """
    rule = rule or quad_rule(DEFAULT_DEGREE)
    values = evaluate_field(g, mesh, rule)
    return FeFunction(P0Space(mesh), element_means(mesh, values, rule))


def write_coefficients(func, path):
    """Dump `dof value` lines."""
    with open(path, 'w', encoding='ascii') as fh:
        for i, value in enumerate(func.coefficients.tolist()):
            fh.write(f"{i} {value!r}\n")
