#!/usr/bin/env python3
"""
Manufactured L-shape case and its finite-difference verification.

Run with: pytest test_benchmark.py
"""

import math
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent))

from bilinear_afem import benchmark, fem, ocp
from bilinear_afem.exceptions import ConfigError, VerificationError
from bilinear_afem.mesh import build_lshape


@pytest.fixture(scope='module')
def case():
    return benchmark.example1()


def test_parameters(case):
    assert (case.alpha, case.a, case.b) == (0.1, 0.01, 5.0)
    data = case.problem_data
    assert data.alpha == 0.1 and data.a == 0.01 and data.b == 5.0


def test_verify_case_passes(case):
    report = benchmark.verify_case(case)
    assert report.n_points == 128
    assert report.gradient_error <= benchmark.GRADIENT_RTOL
    assert report.laplacian_error <= benchmark.LAPLACIAN_RTOL
    assert report.boundary_error <= benchmark.BOUNDARY_ATOL


def test_corrupted_gradient_is_caught(case):
    with pytest.raises(VerificationError) as info:
        benchmark.verify_case(benchmark.corrupt_gradient(case))
    assert info.value.quantity == 'gradient of y'
    assert info.value.point is not None


def test_singular_factor_is_harmonic():
    x, y, h = 0.3, 0.4, 1e-4
    s = benchmark.singular_factor
    lap = (s(x + h, y) + s(x - h, y) + s(x, y + h) + s(x, y - h) - 4.0 * s(x, y)) / h ** 2
    assert abs(lap) <= 1e-5


def test_singular_factor_values():
    # rho = 1, omega = pi / 2
    assert float(benchmark.singular_factor(0.0, 1.0)) == pytest.approx(math.sin(math.pi / 3.0), rel=1e-14)
    assert np.allclose(benchmark.singular_gradient(np.array([0.0]), np.array([0.0])), 0.0)


def test_exact_fields_vanish_on_boundary(case):
    points = benchmark.lshape_boundary_points(200)
    x, y = points[:, 0], points[:, 1]
    assert np.abs(case.y(x, y)).max() <= 1e-10
    assert np.abs(case.p(x, y)).max() <= 1e-10


def test_control_hits_lower_bound_near_corner(case):
    x = np.array([-7e-5, -1e-5, 0.0])
    y = np.array([7e-5, 2e-5, 1e-6])
    assert np.all(case.u(x, y) == case.a)


def test_control_within_bounds(case):
    pts = benchmark.sample_points(case, 64)
    u = case.u(pts[:, 0], pts[:, 1])
    assert np.all(u >= case.a) and np.all(u <= case.b)


def test_source_consistent_with_state_equation(case):
    pts = benchmark.sample_points(case, 32)
    x, y = pts[:, 0], pts[:, 1]
    residual = -case.lap_y(x, y) + case.u(x, y) * case.y(x, y) - case.f(x, y)
    assert np.abs(residual).max() <= 1e-12


def test_sample_points_deterministic_and_inside(case):
    first = benchmark.sample_points(case, 50)
    second = benchmark.sample_points(case, 50)
    assert np.array_equal(first, second)
    assert np.all(case.contains(first[:, 0], first[:, 1], benchmark.STENCIL_MARGIN))
    assert np.all(np.hypot(first[:, 0], first[:, 1]) > benchmark.MIN_RADIUS)


def test_lshape_contains():
    x = np.array([-0.5, 0.5, 0.5, 1.5])
    y = np.array([-0.5, 0.5, -0.5, 0.0])
    assert benchmark.lshape_contains(x, y).tolist() == [True, True, False, False]


def test_case_lookup():
    assert benchmark.get_case('lshape').name == 'lshape'
    with pytest.raises(ConfigError, match='2D'):
        benchmark.get_case('cube')
    with pytest.raises(ConfigError):
        benchmark.get_case('disk')


def test_diagnostic_assumption(case):
    mesh = build_lshape(1)
    space = fem.P1Space(mesh)
    zero = lambda x, y: np.zeros_like(x)
    data = ocp.ProblemData(f=0.0, y_omega=0.0, alpha=0.1, a=0.01, b=5.0)
    solution = ocp.SemiSolution(fem.zero_function(space), fem.zero_function(space), 0, 0.0, data=data)
    assert benchmark.diagnostic_assumption(SimpleNamespace(y=zero, p=zero), solution) == 0.0

    solved = ocp.solve_semi(build_lshape(2), case.problem_data)
    assert benchmark.diagnostic_assumption(case, solved) > 0.0


if __name__ == '__main__':
    sys.exit(pytest.main([__file__, '-v']))
