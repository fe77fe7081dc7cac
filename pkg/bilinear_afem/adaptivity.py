"""
Adaptive loop: solve, estimate, mark, refine

Each pass solves the discrete optimality system (warm-started from the
previous mesh), computes the element indicators, marks with the maximum
strategy and bisects the marked elements. One LoopRecord is produced per
pass.
"""

import logging
import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import fem, ocp
from .benchmark import diagnostic_assumption
from .estimators import (LOCAL_EFFICIENCY_CONSTANT, EstimatorBreakdown, ErrorReport, estimate, exact_errors,
                         local_efficiency_check, oscillation)
from .exceptions import ConfigError, NewtonDivergenceError, SolverError
from .mesh import refine
from .quadrature import DEFAULT_DEGREE, quad_rule

logger = logging.getLogger(__name__)

MARKING_FRACTION = 0.5
MAX_ITERATIONS = 40
MAX_NDOF = 200_000
ESTIMATOR_FLOOR = 1e-10
RATE_TAIL = 6

RATE_QUANTITIES = ('err_y_h1', 'err_p_h1', 'err_u_l2', 'err_total', 'est_total')


@dataclass(frozen=True)
class StoppingCriteria:
    """Bounds that end the adaptive loop; the first one reached wins."""
    max_iterations: float = MAX_ITERATIONS
    max_ndof: float = MAX_NDOF
    estimator_floor: float = ESTIMATOR_FLOOR

    def __post_init__(self):
        if not (math.isfinite(self.max_iterations) or math.isfinite(self.max_ndof)
                or self.estimator_floor > 0.0):
            raise ConfigError("At least one stopping bound must be finite")
        if self.max_iterations < 0 or self.max_ndof < 1:
            raise ConfigError(f"Invalid stopping bounds: max_iterations={self.max_iterations}, "
                              f"max_ndof={self.max_ndof}")

    def reason(self, iteration, ndof, est_total):
        """Why the loop stops after `iteration`, or None to continue."""
        if iteration >= self.max_iterations:
            return f"reached {int(self.max_iterations)} iterations"
        if ndof >= self.max_ndof:
            return f"reached {ndof} degrees of freedom (limit {int(self.max_ndof)})"
        if est_total <= self.estimator_floor:
            return f"estimator {est_total:.3e} below floor {self.estimator_floor:.1e}"
        return None


@dataclass(frozen=True)
class LoopRecord:
    """
    Outcome of one adaptive pass.

    `errors` is None when no exact solution was supplied; osc_f and
    osc_y_omega are the global data oscillations on the pass's mesh.
    With an exact solution, efficiency_ratio is the largest sampled local
    efficiency ratio and product_error is ||y p - y_h p_h||.
    """
    iteration: int
    ndof: int
    elements: int
    estimator: EstimatorBreakdown
    errors: Optional[ErrorReport]
    newton_iters: int
    wall_time: float
    osc_f: float = math.nan
    osc_y_omega: float = math.nan
    efficiency_ratio: float = math.nan
    product_error: float = math.nan

    def as_row(self):
        """Flat dict keyed by the CSV column names."""
        errors = self.errors
        missing = math.nan
        return {
            'iter': self.iteration,
            'ndof': self.ndof,
            'elements': self.elements,
            'err_y_h1': errors.err_y_h1 if errors else missing,
            'err_p_h1': errors.err_p_h1 if errors else missing,
            'err_u_l2': errors.err_u_l2 if errors else missing,
            'err_total': errors.err_total if errors else missing,
            'est_st': self.estimator.est_st,
            'est_adj': self.estimator.est_adj,
            'est_ct': self.estimator.est_ct,
            'est_total': self.estimator.est_total,
            'effectivity': errors.effectivity if errors else missing,
            'newton_iters': self.newton_iters,
            'wall_time_s': self.wall_time,
        }


@dataclass(frozen=True, eq=False)
class AdaptiveStep:
    """One pass with the objects behind its record."""
    record: LoopRecord
    mesh: object
    solution: object
    estimator: EstimatorBreakdown


def count_ndof(scheme, mesh):
    """2 dim(P1) + dim(P0) for the fully discrete scheme, 2 dim(P1) otherwise."""
    n_p1 = fem.P1Space(mesh).dim
    if scheme == 'fully':
        return 2 * n_p1 + mesh.n_elements
    return 2 * n_p1


def mark_max(indicators, fraction=MARKING_FRACTION):
    """
    Maximum marking: {T : E_T^2 > fraction * max E^2}.

    fraction = 0 marks every element (uniform refinement).

    Args:
        indicators: IndicatorField or (Ne,) array of E_T
        fraction: in [0, 1)

    Returns:
        set of element ids; empty when every indicator is zero
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"Marking fraction must lie in [0, 1), got {fraction}")
    values = np.asarray(getattr(indicators, 'values', indicators), dtype=float)
    if values.size == 0:
        raise ValueError("Cannot mark an empty indicator field")
    if fraction == 0.0:
        return set(range(values.size))
    squared = values ** 2
    return set(np.flatnonzero(squared > fraction * squared.max()).tolist())


def iterate_adaptive(scheme, data, mesh, criteria=None, fraction=MARKING_FRACTION, exact=None,
                     rule=None, tol=ocp.NEWTON_TOL, max_iter=ocp.NEWTON_MAX_ITER):
    """
    Generator form of adaptive_loop(), yielding an AdaptiveStep per pass.

    The step of the final pass carries the last mesh and solution, which
    callers use for dumps.
    """
    criteria = criteria or StoppingCriteria()
    rule = rule or quad_rule(DEFAULT_DEGREE)
    previous = None
    iteration = 0
    while True:
        started = time.perf_counter()
        solution = ocp.solve(scheme, mesh, data, init=previous, rule=rule, tol=tol, max_iter=max_iter)
        breakdown = estimate(solution, rule)
        errors = None
        efficiency_ratio = product_error = math.nan
        if exact is not None:
            errors = exact_errors(mesh, solution, exact, scheme, rule, breakdown=breakdown)
            sample = local_efficiency_check(mesh, solution, exact, rule, seed=iteration, breakdown=breakdown)
            efficiency_ratio = sample.max_ratio
            if efficiency_ratio > LOCAL_EFFICIENCY_CONSTANT:
                logger.warning("iter %d: local efficiency ratio %.2f exceeds %.0f",
                               iteration, efficiency_ratio, LOCAL_EFFICIENCY_CONSTANT)
            product_error = diagnostic_assumption(exact, solution, rule)
        record = LoopRecord(
            iteration=iteration,
            ndof=count_ndof(scheme, mesh),
            elements=mesh.n_elements,
            estimator=breakdown,
            errors=errors,
            newton_iters=solution.newton_iters,
            wall_time=time.perf_counter() - started,
            osc_f=oscillation(mesh, data.f, rule=rule),
            osc_y_omega=oscillation(mesh, data.y_omega, rule=rule),
            efficiency_ratio=efficiency_ratio,
            product_error=product_error,
        )
        if errors is not None:
            logger.info("iter %d: ndof=%d elements=%d est=%.4e err=%.4e eff=%.3f",
                        iteration, record.ndof, record.elements, breakdown.est_total,
                        errors.err_total, errors.effectivity)
        else:
            logger.info("iter %d: ndof=%d elements=%d est=%.4e",
                        iteration, record.ndof, record.elements, breakdown.est_total)
        yield AdaptiveStep(record, mesh, solution, breakdown)

        reason = criteria.reason(iteration, record.ndof, breakdown.est_total)
        if reason:
            logger.info("Adaptive loop stopped: %s", reason)
            return
        marked = mark_max(breakdown.indicators['total'], fraction)
        if not marked:
            logger.info("Adaptive loop stopped: no element marked")
            return
        mesh = refine(mesh, marked)
        previous = solution
        iteration += 1


def adaptive_loop(scheme, data, mesh, criteria=None, fraction=MARKING_FRACTION, exact=None,
                  rule=None, tol=ocp.NEWTON_TOL, max_iter=ocp.NEWTON_MAX_ITER, on_record=None):
    """
    Run the adaptive loop to completion.

    Args:
        scheme: 'fully' or 'semi'
        data: ProblemData
        mesh: initial conforming mesh
        criteria: StoppingCriteria (defaults: 40 iterations, 2e5 dofs,
            estimator floor 1e-10)
        fraction: marking fraction, 1/2 by default; 0 refines uniformly
        exact: optional manufactured case for exact errors
        rule: QuadRule (default degree 19)
        tol, max_iter: Newton tolerance and iteration cap
        on_record: optional callback invoked with each LoopRecord

    Returns:
        list of LoopRecord

    Raises:
        NewtonDivergenceError: with the records completed so far in
            its `records` attribute; a failed linear solve outside
            the Newton iteration is reported the same way
    """
    records = []
    try:
        for step in iterate_adaptive(scheme, data, mesh, criteria, fraction, exact, rule, tol, max_iter):
            records.append(step.record)
            if on_record is not None:
                on_record(step.record)
    except NewtonDivergenceError as exc:
        exc.records = list(records)
        logger.error("Newton diverged after %d adaptive iterations: %s", len(records), exc)
        raise
    except SolverError as exc:
        logger.error("Linear solve failed after %d adaptive iterations: %s", len(records), exc)
        raise NewtonDivergenceError(f"Linear solve failed: {exc}", records=records) from exc
    return records


def fit_rate(points, tail=None):
    """
    Least-squares slope of log(value) against log(ndof).

    Args:
        points: sequence of (ndof, value)
        tail: use only the last `tail` points (all when None)

    Returns:
        float: fitted slope

    Raises:
        ValueError: with fewer than two points or nonpositive entries
    """
    points = list(points)
    if tail is not None:
        points = points[-tail:]
    if len(points) < 2:
        raise ValueError(f"Need at least two points to fit a rate, got {len(points)}")
    ndof, values = np.asarray(points, dtype=float).T
    if not (np.all(np.isfinite(values)) and np.all(ndof > 0.0) and np.all(values > 0.0)):
        raise ValueError("Rates need positive ndof and positive finite values")
    slope, _intercept = np.polyfit(np.log(ndof), np.log(values), 1)
    return float(slope)


def rate_summary(records, tail=RATE_TAIL):
    """
    Fitted slopes vs ndof for the error and estimator columns.

    Quantities that are missing or nonpositive in the tail report NaN.
    """
    rates = {}
    for name in RATE_QUANTITIES:
        points = [(r.ndof, r.as_row()[name]) for r in records]
        try:
            rates[name] = fit_rate(points, tail)
        except ValueError:
            rates[name] = math.nan
    return rates
