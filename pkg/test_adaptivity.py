#!/usr/bin/env python3
"""
Maximum marking, the adaptive loop and rate fitting.

Run with: pytest test_adaptivity.py
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent))

from bilinear_afem import adaptivity, fem, ocp
from bilinear_afem.benchmark import example1
from bilinear_afem.estimators import LOCAL_EFFICIENCY_CONSTANT, IndicatorField
from bilinear_afem.exceptions import ConfigError, NewtonDivergenceError, SolverError
from bilinear_afem.mesh import build_lshape


@pytest.fixture(scope='module')
def case():
    return example1()


def comparable(row):
    return {k: v for k, v in row.items() if k != 'wall_time_s'}


def test_mark_max_examples():
    assert adaptivity.mark_max(np.array([2.0, 1.0, 1.0, math.sqrt(3.0)]), 0.5) == {0, 3}
    assert adaptivity.mark_max(np.ones(5), 0.5) == {0, 1, 2, 3, 4}
    assert adaptivity.mark_max(np.array([0.7]), 0.5) == {0}
    assert adaptivity.mark_max(np.zeros(4), 0.5) == set()


def test_mark_max_accepts_indicator_field():
    field = IndicatorField(np.array([0.1, 0.9, 0.8]), 'total')
    assert adaptivity.mark_max(field) == {1, 2}


def test_mark_max_fraction_zero_marks_everything():
    assert adaptivity.mark_max(np.array([0.0, 1.0, 0.0]), 0.0) == {0, 1, 2}


def test_mark_max_rejects_bad_input():
    with pytest.raises(ValueError):
        adaptivity.mark_max(np.ones(3), 1.0)
    with pytest.raises(ValueError):
        adaptivity.mark_max(np.ones(3), -0.1)
    with pytest.raises(ValueError):
        adaptivity.mark_max(np.array([]), 0.5)


def test_fit_rate_exact_power_law():
    points = [(n, 3.0 * n ** -0.5) for n in (100, 400, 1600, 6400)]
    assert adaptivity.fit_rate(points) == pytest.approx(-0.5, abs=1e-12)
    assert adaptivity.fit_rate([(10, 2.0), (1000, 2.0)]) == pytest.approx(0.0, abs=1e-12)


def test_fit_rate_with_noise():
    rng = np.random.default_rng(1)
    ndof = np.geomspace(100, 1e5, 8)
    values = ndof ** -1.0 * (1.0 + 0.01 * rng.standard_normal(8))
    assert adaptivity.fit_rate(zip(ndof, values)) == pytest.approx(-1.0, abs=0.05)


def test_fit_rate_uses_tail():
    points = [(10, 1.0), (20, 1.0)] + [(n, n ** -0.5) for n in (100, 400, 1600)]
    assert adaptivity.fit_rate(points, tail=3) == pytest.approx(-0.5, abs=1e-12)


def test_fit_rate_rejects_degenerate_input():
    with pytest.raises(ValueError):
        adaptivity.fit_rate([(100, 1.0)])
    with pytest.raises(ValueError):
        adaptivity.fit_rate([(100, 1.0), (200, 0.0)])
    with pytest.raises(ValueError):
        adaptivity.fit_rate([(100, 1.0), (200, math.nan)])


def test_count_ndof():
    mesh = build_lshape(1)
    n_p1 = fem.P1Space(mesh).dim
    assert adaptivity.count_ndof('fully', mesh) == 2 * n_p1 + mesh.n_elements
    assert adaptivity.count_ndof('semi', mesh) == 2 * n_p1


def test_stopping_criteria_validation():
    with pytest.raises(ConfigError):
        adaptivity.StoppingCriteria(max_iterations=math.inf, max_ndof=math.inf, estimator_floor=0.0)
    with pytest.raises(ConfigError):
        adaptivity.StoppingCriteria(max_iterations=-1)
    criteria = adaptivity.StoppingCriteria(max_iterations=3, max_ndof=1000, estimator_floor=1e-6)
    assert criteria.reason(3, 10, 1.0) is not None
    assert criteria.reason(1, 1000, 1.0) is not None
    assert criteria.reason(1, 10, 1e-7) is not None
    assert criteria.reason(1, 10, 1.0) is None


def test_zero_iterations_gives_one_record(case):
    records = adaptivity.adaptive_loop('fully', case.problem_data, build_lshape(1),
                                       criteria=adaptivity.StoppingCriteria(max_iterations=0), exact=case)
    assert len(records) == 1
    record = records[0]
    assert record.iteration == 0
    assert record.errors is not None
    assert record.errors.effectivity == pytest.approx(record.estimator.est_total / record.errors.err_total)


@pytest.mark.parametrize('scheme', ocp.SCHEMES)
def test_loop_refines_and_reports(scheme, case):
    seen = []
    records = adaptivity.adaptive_loop(scheme, case.problem_data, build_lshape(1),
                                       criteria=adaptivity.StoppingCriteria(max_iterations=3),
                                       exact=case, on_record=seen.append)
    assert seen == records
    assert [r.iteration for r in records] == [0, 1, 2, 3]
    ndof = [r.ndof for r in records]
    assert all(a < b for a, b in zip(ndof, ndof[1:]))
    for record in records:
        assert record.newton_iters >= 0
        assert record.osc_f >= 0.0 and record.osc_y_omega >= 0.0
        assert 0.0 < record.efficiency_ratio <= LOCAL_EFFICIENCY_CONSTANT
        assert record.product_error > 0.0 and math.isfinite(record.product_error)
        if scheme == 'semi':
            assert record.estimator.est_ct == 0.0


def test_loop_is_deterministic(case):
    run = lambda: adaptivity.adaptive_loop('semi', case.problem_data, build_lshape(1),
                                           criteria=adaptivity.StoppingCriteria(max_iterations=2), exact=case)
    first, second = run(), run()
    assert [comparable(r.as_row()) for r in first] == [comparable(r.as_row()) for r in second]


def test_uniform_marking_bisects_every_element(case):
    records = adaptivity.adaptive_loop('fully', case.problem_data, build_lshape(1),
                                       criteria=adaptivity.StoppingCriteria(max_iterations=2), fraction=0.0)
    elements = [r.elements for r in records]
    assert all(b >= 2 * a for a, b in zip(elements, elements[1:]))
    assert all(r.errors is None for r in records)


def test_ndof_limit_stops_loop(case):
    records = adaptivity.adaptive_loop('semi', case.problem_data, build_lshape(1),
                                       criteria=adaptivity.StoppingCriteria(max_iterations=40, max_ndof=30))
    assert records[-1].ndof >= 30
    assert all(r.ndof < 30 for r in records[:-1])


def test_divergence_carries_completed_records(case, monkeypatch):
    real_solve = ocp.solve
    calls = {'n': 0}

    def flaky_solve(*args, **kwargs):
        calls['n'] += 1
        if calls['n'] == 3:
            raise NewtonDivergenceError("forced failure")
        return real_solve(*args, **kwargs)

    monkeypatch.setattr(ocp, 'solve', flaky_solve)
    with pytest.raises(NewtonDivergenceError) as info:
        adaptivity.adaptive_loop('fully', case.problem_data, build_lshape(1),
                                 criteria=adaptivity.StoppingCriteria(max_iterations=5))
    assert [r.iteration for r in info.value.records] == [0, 1]


def test_linear_solve_failure_carries_completed_records(case, monkeypatch):
    real_solve = ocp.solve
    calls = {'n': 0}

    def stalling_solve(*args, **kwargs):
        calls['n'] += 1
        if calls['n'] == 3:
            raise SolverError("CG stalled", residual=1e-3, iterations=10)
        return real_solve(*args, **kwargs)

    monkeypatch.setattr(ocp, 'solve', stalling_solve)
    with pytest.raises(NewtonDivergenceError) as info:
        adaptivity.adaptive_loop('semi', case.problem_data, build_lshape(1),
                                 criteria=adaptivity.StoppingCriteria(max_iterations=5))
    assert [r.iteration for r in info.value.records] == [0, 1]
    assert isinstance(info.value.__cause__, SolverError)


def test_rate_summary_reports_nan_without_errors(case):
    records = adaptivity.adaptive_loop('semi', case.problem_data, build_lshape(1),
                                       criteria=adaptivity.StoppingCriteria(max_iterations=2))
    rates = adaptivity.rate_summary(records)
    assert set(rates) == set(adaptivity.RATE_QUANTITIES)
    assert math.isnan(rates['err_total'])
    assert math.isfinite(rates['est_total'])
    assert all(math.isnan(r.efficiency_ratio) and math.isnan(r.product_error) for r in records)


if __name__ == '__main__':
    sys.exit(pytest.main([__file__, '-v']))
