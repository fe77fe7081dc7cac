#!/usr/bin/env python3
"""
P1/P0 spaces, assembly, the SPD solver and edge jumps.

Run with: pytest test_fem.py
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent))

from bilinear_afem import fem
from bilinear_afem.exceptions import AdmissibilityError, MeshError, SolverError
from bilinear_afem.mesh import Mesh, build_lshape, build_unit_square, edge_key
from bilinear_afem.quadrature import element_points, element_weights, quad_rule


def reference_triangle():
    vertices = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    return Mesh(vertices, np.array([[0, 1, 2]]), np.array([1]))


def test_local_stiffness_on_reference_triangle():
    K = fem.local_stiffness(reference_triangle())[0]
    expected = 0.5 * np.array([[2.0, -1.0, -1.0], [-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]])
    assert np.allclose(K, expected, atol=1e-15)


def test_local_mass_on_reference_triangle():
    M = fem.local_mass(reference_triangle())[0]
    expected = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 24.0
    assert np.allclose(M, expected, atol=1e-15)


def test_weighted_mass_with_constant_weight_matches_exact_mass():
    mesh = build_lshape(1)
    rule = quad_rule(4)
    values = np.full((mesh.n_elements, rule.n_points), 3.0)
    assert np.allclose(fem.local_weighted_mass(mesh, values, rule), 3.0 * fem.local_mass(mesh), atol=1e-14)


def test_system_matrix_on_two_by_two_square():
    space = fem.P1Space(build_unit_square(2))
    assert space.dim == 1
    # five-point stencil diagonal plus six mass contributions |T|/6
    A = fem.assemble_system(space, 1.0).toarray()
    assert A.shape == (1, 1)
    assert A[0, 0] == pytest.approx(4.0 + 6 * (1.0 / 8.0) / 6.0, abs=1e-14)


def test_system_matrix_symmetric():
    mesh = build_lshape(2)
    space = fem.P1Space(mesh)
    u = fem.FeFunction(fem.P0Space(mesh), np.linspace(0.5, 2.0, mesh.n_elements))
    A = fem.assemble_system(space, u)
    assert abs(A - A.T).max() < 1e-14


def test_nonpositive_reaction_rejected():
    space = fem.P1Space(build_lshape(1))
    with pytest.raises(AdmissibilityError):
        fem.assemble_system(space, 0.0)
    values = np.ones(space.mesh.n_elements)
    values[3] = -1.0
    with pytest.raises(AdmissibilityError):
        fem.assemble_system(space, fem.FeFunction(fem.P0Space(space.mesh), values))


def test_load_vector_of_constant_one():
    mesh = build_unit_square(3)
    space = fem.P1Space(mesh)
    expected = np.zeros(mesh.n_vertices)
    np.add.at(expected, mesh.elements.ravel(), np.repeat(mesh.areas / 3.0, 3))
    assert np.allclose(fem.assemble_rhs(space, 1.0), expected[space.free_vertices], rtol=1e-13, atol=0.0)
    assert np.allclose(fem.assemble_rhs(space, lambda x, y: np.ones_like(x)), expected[space.free_vertices], rtol=1e-13)
    assert np.array_equal(fem.assemble_rhs(space, 0.0), np.zeros(space.dim))
    # six elements of area 1/8 around the centre
    centre = fem.assemble_rhs(fem.P1Space(build_unit_square(2)), 1.0)
    assert centre == pytest.approx([0.25], rel=1e-13)
    rule = quad_rule(4)
    local = fem.load_vector_local(mesh, np.ones((mesh.n_elements, rule.n_points)), rule)
    assert fem.assemble_vector(mesh, local).sum() == pytest.approx(1.0, rel=1e-13)


def test_fe_function_checks_length():
    space = fem.P1Space(build_lshape(1))
    with pytest.raises(ValueError):
        fem.FeFunction(space, np.zeros(space.dim + 1))


def test_solve_spd_matches_direct_solver():
    n = 50
    A = sp.diags([-np.ones(n - 1), 2.0 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format='csr')
    b = np.sin(np.arange(n, dtype=float))
    x = fem.solve_spd(A, b)
    assert np.allclose(x, spsolve(A.tocsc(), b), rtol=1e-9, atol=1e-10)
    assert np.linalg.norm(A @ x - b) <= 1e-12 * np.linalg.norm(b) * 1.0001


def test_solve_spd_zero_rhs():
    A = sp.identity(4, format='csr')
    assert np.array_equal(fem.solve_spd(A, np.zeros(4)), np.zeros(4))


def test_solve_spd_rejects_nonpositive_diagonal():
    A = sp.diags([np.array([1.0, -1.0, 2.0])], [0], format='csr')
    with pytest.raises(SolverError):
        fem.solve_spd(A, np.ones(3))


def h1_error_sine(n):
    mesh = build_unit_square(n)
    space = fem.P1Space(mesh)
    pi = math.pi
    source = lambda x, y: (2.0 * pi ** 2 + 1.0) * np.sin(pi * x) * np.sin(pi * y)
    z = fem.single_equation_solve(space, 1.0, source)
    rule = quad_rule(8)
    pts = element_points(mesh, rule)
    X, Y = pts[..., 0], pts[..., 1]
    exact = np.stack([pi * np.cos(pi * X) * np.sin(pi * Y), pi * np.sin(pi * X) * np.cos(pi * Y)], axis=-1)
    discrete = fem.p1_gradients(mesh, z.nodal_values())[:, None, :]
    return math.sqrt(float(np.sum(element_weights(mesh, rule) * np.sum((exact - discrete) ** 2, axis=-1))))


def test_single_equation_h1_convergence():
    errors = [h1_error_sine(n) for n in (8, 16, 32)]
    assert errors[0] > errors[1] > errors[2]
    assert errors[1] / errors[2] == pytest.approx(2.0, abs=0.1)


def test_energy_of_discrete_solution_bounded_by_source():
    ratios = []
    for n in (8, 16, 32):
        space = fem.P1Space(build_unit_square(n))
        z = fem.single_equation_solve(space, 1.0, 1.0)
        stiffness = fem.assemble_system(space, 0.0, check_admissible=False)
        # ||f|| = 1 on the unit square
        ratios.append(math.sqrt(z.coefficients @ (stiffness @ z.coefficients)))
    # Poincare constant of the unit square
    assert max(ratios) <= 1.0 / (math.pi * math.sqrt(2.0))
    assert max(ratios) / min(ratios) <= 1.25


def test_edge_jumps_vanish_for_global_linear_function():
    mesh = build_lshape(2)
    nodal = 2.0 * mesh.vertices[:, 0] - 0.5 * mesh.vertices[:, 1]
    assert np.allclose(fem.edge_jumps(mesh, nodal), 0.0, atol=1e-13)


def test_edge_jump_of_single_hat():
    mesh = build_unit_square(1)
    # value 1 at (1, 0) only: gradient (1, -1) below the diagonal, 0 above
    nodal = np.array([0.0, 1.0, 0.0, 0.0])
    assert fem.edge_jump(mesh, nodal, (0, 3)) == pytest.approx(-math.sqrt(2.0), abs=1e-14)
    with pytest.raises(MeshError):
        fem.edge_jump(mesh, nodal, edge_key(0, 1))


def test_p0_project_returns_element_means():
    mesh = build_unit_square(1)
    projected = fem.p0_project(mesh, lambda x, y: x)
    assert np.allclose(projected.coefficients, mesh.element_coords[:, :, 0].mean(axis=1), atol=1e-14)
    assert np.allclose(fem.p0_project(mesh, 4.0).coefficients, 4.0)


def test_eval_p1_inside_and_outside():
    mesh = build_unit_square(2)
    space = fem.P1Space(mesh)
    func = fem.interpolate_p1(space, lambda x, y: x * (1.0 - x) * y * (1.0 - y))
    point = mesh.element_coords[0].mean(axis=0)
    value, gradient = fem.eval_p1(space, func, 0, point)
    assert value == pytest.approx(float(fem.p1_at_quadrature(mesh, func.nodal_values(), quad_rule(1))[0, 0]))
    assert gradient.shape == (2,)
    with pytest.raises(MeshError):
        fem.eval_p1(space, func, 0, (0.9, 0.9))


def test_write_coefficients(tmp_path):
    space = fem.P1Space(build_lshape(1))
    func = fem.FeFunction(space, [0.5, -1.0, 2.0])
    path = tmp_path / 'coeffs.txt'
    fem.write_coefficients(func, path)
    lines = path.read_text().splitlines()
    assert lines == ['0 0.5', '1 -1.0', '2 2.0']


if __name__ == '__main__':
    sys.exit(pytest.main([__file__, '-v']))
