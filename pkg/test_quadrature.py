#!/usr/bin/env python3
"""
Triangle quadrature rules.

Run with: pytest test_quadrature.py
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent))

from bilinear_afem.exceptions import QuadratureError
from bilinear_afem.mesh import build_lshape
from bilinear_afem.quadrature import (DEFAULT_DEGREE, MAX_DEGREE, element_points, element_weights,
                                      evaluate_field, integrate_reference, quad_rule)


def monomial_integral(i, j):
    """Exact integral of x^i y^j over the reference triangle."""
    return math.factorial(i) * math.factorial(j) / math.factorial(i + j + 2)


@pytest.mark.parametrize('degree', range(1, MAX_DEGREE + 1))
def test_weights_positive_and_normalized(degree):
    rule = quad_rule(degree)
    assert np.all(rule.weights > 0.0)
    assert rule.weights.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.all(rule.barycentric >= 0.0)
    assert np.allclose(rule.barycentric.sum(axis=1), 1.0)


@pytest.mark.parametrize('degree', [1, 2, 5, 10, DEFAULT_DEGREE, MAX_DEGREE])
def test_monomials_integrated_exactly(degree):
    rule = quad_rule(degree)
    for i in range(degree + 1):
        for j in range(degree + 1 - i):
            value = integrate_reference(lambda x, y: x ** i * y ** j, rule)
            assert value == pytest.approx(monomial_integral(i, j), rel=1e-12), (i, j)


def test_unsupported_degrees_rejected():
    for degree in (0, MAX_DEGREE + 1, -3, 2.5):
        with pytest.raises(QuadratureError):
            quad_rule(degree)


def test_rules_are_cached():
    assert quad_rule(7) is quad_rule(7)


def test_physical_weights_sum_to_areas():
    mesh = build_lshape(2)
    rule = quad_rule(4)
    assert np.allclose(element_weights(mesh, rule).sum(axis=1), mesh.areas)
    assert element_points(mesh, rule).shape == (mesh.n_elements, rule.n_points, 2)


def test_integral_of_linear_field_over_lshape():
    mesh = build_lshape(1)
    rule = quad_rule(2)
    w = element_weights(mesh, rule)
    # x integrates to -1/2 over the L-shape; the constant 2 to 6
    assert np.sum(w * evaluate_field(lambda x, y: x, mesh, rule)) == pytest.approx(-0.5, abs=1e-14)
    assert np.sum(w * evaluate_field(2.0, mesh, rule)) == pytest.approx(6.0, abs=1e-14)


if __name__ == '__main__':
    sys.exit(pytest.main([__file__, '-v']))
