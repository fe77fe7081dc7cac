"""
Residual a posteriori error indicators

For a discrete pair (y, p) and a reaction coefficient u (the P0 control of
the fully discrete scheme, or the pointwise projection of the variational
discretization) the element indicators are

    E_st,T^2  = h_T^2 ||f - u y||_T^2         + h_T sum_S ||[[grad y . nu]]||_S^2
    E_adj,T^2 = h_T^2 ||y - y_omega - u p||_T^2 + h_T sum_S ||[[grad p . nu]]||_S^2
    E_ct,T^2  = ||Pi(y p / alpha) - u_T||_T^2      (fully discrete scheme only)

where S runs over the interior edges of T. Every interior edge contributes
in full to both of its elements, each weighted by its own h_T.

Exact errors against manufactured solutions, oscillation terms and local
efficiency ratios live here too, since they share the same element loops.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .exceptions import SchemeError
from .mesh import star
from .ocp import project_box
from .quadrature import DEFAULT_DEGREE, element_points, element_weights, evaluate_field, quad_rule

logger = logging.getLogger(__name__)

INDICATOR_TAGS = ('state', 'adjoint', 'control', 'total')

# upper bound for sampled local efficiency ratios, frozen across meshes and schemes
LOCAL_EFFICIENCY_CONSTANT = 50.0


# ----------------------------------------------------------------------
# Result types
# ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class IndicatorField:
    """
    Per-element indicator values E_T (not squared).

    Attributes:
        values: (Ne,) nonnegative values
        tag: one of 'state', 'adjoint', 'control', 'total'
    """
    values: np.ndarray
    tag: str

    def __post_init__(self):
        if self.tag not in INDICATOR_TAGS:
            raise ValueError(f"Unknown indicator tag '{self.tag}'")
        values = np.array(self.values, dtype=float)
        if np.any(values < 0.0):
            raise ValueError("Indicator values must be nonnegative")
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def squared(self):
        return self.values ** 2

    @property
    def total(self):
        """Global estimator: root-sum-square of the element values."""
        return math.sqrt(float(np.sum(self.squared)))

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True, eq=False)
class EstimatorBreakdown:
    """
    Global estimator split into its contributions.

    est_ct is 0 for the semi-discrete scheme. `indicators` holds the
    IndicatorFields by tag, 'total' included.
    """
    est_st: float
    est_adj: float
    est_ct: float
    est_total: float
    indicators: dict = field(default_factory=dict, repr=False)


@dataclass(frozen=True)
class ErrorReport:
    """Exact errors of a discrete solution and the effectivity index."""
    err_y_h1: float
    err_p_h1: float
    err_u_l2: float
    err_total: float
    effectivity: float = math.nan


@dataclass(frozen=True)
class EfficiencySample:
    """
    Local efficiency ratios on sampled elements.

    ratio_state[i] = E_st,T / (patch error terms + osc(f; N_T)) for
    element elements[i]; ratio_adjoint likewise with osc(y_omega; N_T).
    """
    elements: tuple
    ratio_state: tuple
    ratio_adjoint: tuple

    @property
    def max_ratio(self):
        finite = [r for r in self.ratio_state + self.ratio_adjoint if math.isfinite(r)]
        return max(finite) if finite else math.nan


# ----------------------------------------------------------------------
# Generic residual kernel
# ----------------------------------------------------------------------

def _values_at_points(g, mesh, rule):
    if callable(g) or np.isscalar(g):
        return evaluate_field(g, mesh, rule)
    values = np.asarray(g, dtype=float)
    shape = (mesh.n_elements, rule.n_points)
    if values.shape != shape:
        raise ValueError(f"Data values must have shape {shape}, got {values.shape}")
    return values


def jump_terms(mesh, nodal):
    """
    h_T sum_{S interior edge of T} |S| [[grad z . nu]]_S^2 per element.

    The jump of a P1 function is constant along each edge.
    """
    jumps = fem.edge_jumps(mesh, nodal)
    per_edge = mesh.edge_lengths * jumps[mesh.element_edges] ** 2
    return mesh.diameters * per_edge.sum(axis=1)


def residual_indicator_squared(mesh, nodal, coefficient, source, rule):
    """
    h_T^2 ||source - c z||_T^2 + jump terms, for any source and coefficient.

    This is the indicator of the single equation -div grad z + c z = source;
    the state and adjoint indicators of both schemes are instances of it.

    Args:
        mesh: Mesh
        nodal: (Nv,) vertex values of the discrete solution z
        coefficient: reaction coefficient (see fem.coefficient_values)
        source: (Ne, nq) source values at the points of `rule`
        rule: QuadRule

    Returns:
        np.ndarray: (Ne,) squared indicators
    """
    zq = fem.p1_at_quadrature(mesh, nodal, rule)
    cq = fem.coefficient_values(coefficient, mesh, rule)
    residual = source - cq * zq
    volume = mesh.diameters ** 2 * np.sum(element_weights(mesh, rule) * residual ** 2, axis=1)
    return volume + jump_terms(mesh, nodal)


# ----------------------------------------------------------------------
# Indicators
# ----------------------------------------------------------------------

def indicator_state(mesh, y, coefficient, f, rule=None):
    """
    State indicators E_st,T.

    Args:
        mesh: Mesh
        y: P1 FeFunction (or vertex values)
        coefficient: reaction coefficient: P0 control, SemiControl, scalar...
        f: source, point-evaluable or (Ne, nq) values at `rule` points
        rule: QuadRule (default degree 19)

    Returns:
        IndicatorField tagged 'state'
    """
    rule = rule or quad_rule(DEFAULT_DEGREE)
    nodal = fem.as_nodal(mesh, y)
    squared = residual_indicator_squared(mesh, nodal, coefficient, _values_at_points(f, mesh, rule), rule)
    return IndicatorField(np.sqrt(squared), 'state')


def indicator_adjoint(mesh, p, y, coefficient, y_omega, rule=None):
    """
    Adjoint indicators E_adj,T, with residual y - y_omega - u p.

    Returns:
        IndicatorField tagged 'adjoint'
    """
    rule = rule or quad_rule(DEFAULT_DEGREE)
    source = fem.p1_at_quadrature(mesh, fem.as_nodal(mesh, y), rule) - _values_at_points(y_omega, mesh, rule)
    squared = residual_indicator_squared(mesh, fem.as_nodal(mesh, p), coefficient, source, rule)
    return IndicatorField(np.sqrt(squared), 'adjoint')


def indicator_control(mesh, y, p, u, data, rule=None):
    """
    Control indicators E_ct,T = ||Pi(y p / alpha) - u_T||_T.

    The projection has kinks inside elements; it is sampled with the
    given rule like every other integrand.

    Args:
        mesh: Mesh
        y, p: P1 FeFunctions or vertex values
        u: P0 control
        data: ProblemData
        rule: QuadRule (default degree 19)

    Raises:
        SchemeError: if u is not a piecewise constant control
    """
    if not (isinstance(u, fem.FeFunction) and u.kind == 'P0'):
        raise SchemeError("The control indicator exists only for the fully discrete scheme (P0 control)")
    rule = rule or quad_rule(DEFAULT_DEGREE)
    yq = fem.p1_at_quadrature(mesh, fem.as_nodal(mesh, y), rule)
    pq = fem.p1_at_quadrature(mesh, fem.as_nodal(mesh, p), rule)
    u_tilde = project_box(yq * pq / data.alpha, data.a, data.b)
    diff = u_tilde - u.coefficients[:, None]
    return IndicatorField(np.sqrt(np.sum(element_weights(mesh, rule) * diff ** 2, axis=1)), 'control')


def total_indicator(*fields):
    """Combine IndicatorFields elementwise by root-sum-square."""
    squared = sum(f.squared for f in fields)
    return IndicatorField(np.sqrt(squared), 'total')


def estimate(solution, rule=None):
    """
    All indicators of a discrete solution.

    Args:
        solution: FullySolution or SemiSolution (with its ProblemData)
        rule: QuadRule (default degree 19)

    Returns:
        EstimatorBreakdown
    """
    mesh, data = solution.mesh, solution.data
    rule = rule or quad_rule(DEFAULT_DEGREE)
    coefficient = solution.control_coefficient()

    fields = {
        'state': indicator_state(mesh, solution.y, coefficient, data.f, rule),
        'adjoint': indicator_adjoint(mesh, solution.p, solution.y, coefficient, data.y_omega, rule),
    }
    if solution.scheme == 'fully':
        fields['control'] = indicator_control(mesh, solution.y, solution.p, solution.u, data, rule)
    fields['total'] = total_indicator(*fields.values())

    est_ct = fields['control'].total if 'control' in fields else 0.0
    breakdown = EstimatorBreakdown(
        est_st=fields['state'].total,
        est_adj=fields['adjoint'].total,
        est_ct=est_ct,
        est_total=fields['total'].total,
        indicators=fields,
    )
    logger.debug("Estimator: st=%.4e adj=%.4e ct=%.4e total=%.4e",
                 breakdown.est_st, breakdown.est_adj, breakdown.est_ct, breakdown.est_total)
    return breakdown


# ----------------------------------------------------------------------
# Oscillation
# ----------------------------------------------------------------------

def oscillation_squared(mesh, g, rule=None):
    """(Ne,) values h_T^2 ||g - P_T g||_T^2, with P_T the element mean."""
    rule = rule or quad_rule(DEFAULT_DEGREE)
    values = evaluate_field(g, mesh, rule)
    means = fem.element_means(mesh, values, rule)
    spread = np.sum(element_weights(mesh, rule) * (values - means[:, None]) ** 2, axis=1)
    return mesh.diameters ** 2 * spread


def oscillation(mesh, g, elements=None, rule=None):
    """
    osc(g; M) = (sum_{T in M} h_T^2 ||g - P_T g||_T^2)^(1/2).

    Args:
        mesh: Mesh
        g: point-evaluable field or scalar
        elements: iterable of element ids (all elements when None)
        rule: QuadRule (default degree 19)
    """
    per_element = oscillation_squared(mesh, g, rule)
    if elements is not None:
        per_element = per_element[np.fromiter(elements, dtype=np.int64)]
    return math.sqrt(float(np.sum(per_element)))


# ----------------------------------------------------------------------
# Exact errors
# ----------------------------------------------------------------------

def _error_terms(mesh, solution, exact, rule):
    """
    Squared error contributions per element.

    `exact` provides y, p, u and grad_y, grad_p as vectorized callables of
    (x, y); gradients return arrays with a trailing axis of length 2.
    """
    pts = element_points(mesh, rule)
    X, Y = pts[..., 0], pts[..., 1]
    w = element_weights(mesh, rule)
    yn, pn = solution.y.nodal_values(), solution.p.nodal_values()

    grad_y = fem.p1_gradients(mesh, yn)[:, None, :]
    grad_p = fem.p1_gradients(mesh, pn)[:, None, :]
    yq = fem.p1_at_quadrature(mesh, yn, rule)
    pq = fem.p1_at_quadrature(mesh, pn, rule)

    if solution.scheme == 'fully':
        uq = np.repeat(solution.u.coefficients[:, None], rule.n_points, axis=1)
    else:
        data = solution.data
        uq = project_box(yq * pq / data.alpha, data.a, data.b)

    return {
        'grad_y': np.sum(w * np.sum((exact.grad_y(X, Y) - grad_y) ** 2, axis=-1), axis=1),
        'grad_p': np.sum(w * np.sum((exact.grad_p(X, Y) - grad_p) ** 2, axis=-1), axis=1),
        'u': np.sum(w * (exact.u(X, Y) - uq) ** 2, axis=1),
        'y': np.sum(w * (exact.y(X, Y) - yq) ** 2, axis=1),
        'p': np.sum(w * (exact.p(X, Y) - pq) ** 2, axis=1),
    }


def effectivity_index(est_total, err_total):
    if err_total > 0.0:
        return est_total / err_total
    return math.inf if est_total > 0.0 else math.nan


def exact_errors(mesh, solution, exact, scheme=None, rule=None, breakdown=None):
    """
    H1-seminorm errors of state and adjoint and the L2 control error.

    The control error uses the P0 control for the fully discrete scheme
    and the pointwise projection Pi(y p / alpha) for the semi-discrete one.

    Args:
        mesh: Mesh of the solution
        solution: FullySolution or SemiSolution
        exact: manufactured case with y, p, u, grad_y, grad_p
        scheme: 'fully' or 'semi' (defaults to the solution's)
        rule: QuadRule (default degree 19)
        breakdown: optional EstimatorBreakdown for the effectivity index

    Returns:
        ErrorReport
    """
    scheme = scheme or solution.scheme
    if scheme != solution.scheme:
        raise SchemeError(f"Solution belongs to the '{solution.scheme}' scheme, not '{scheme}'")
    if mesh is not solution.mesh:
        raise ValueError("Solution does not live on the given mesh")
    rule = rule or quad_rule(DEFAULT_DEGREE)
    terms = _error_terms(mesh, solution, exact, rule)
    err_y = math.sqrt(float(terms['grad_y'].sum()))
    err_p = math.sqrt(float(terms['grad_p'].sum()))
    err_u = math.sqrt(float(terms['u'].sum()))
    err_total = math.sqrt(err_y ** 2 + err_p ** 2 + err_u ** 2)
    effectivity = effectivity_index(breakdown.est_total, err_total) if breakdown is not None else math.nan
    return ErrorReport(err_y, err_p, err_u, err_total, effectivity)


def local_efficiency_check(mesh, solution, case, rule=None, n_samples=20, seed=0, breakdown=None):
    """
    Ratios of local indicators to the local error bounds on random elements.

    For element T with patch N_T (T and its edge neighbours):

        E_st,T  / (||grad e_y||_N + ||e_u||_N + h_T ||e_y||_N + osc(f; N_T))
        E_adj,T / (||grad e_p||_N + ||e_u||_N + h_T ||e_p||_N + h_T ||e_y||_N
                   + osc(y_omega; N_T))

    Bounded ratios across meshes indicate local efficiency.

    Args:
        mesh: Mesh
        solution: discrete solution on mesh
        case: manufactured case (exact fields)
        rule: QuadRule (default degree 19)
        n_samples: number of sampled elements (capped at Ne)
        seed: seed of the element sampler
        breakdown: precomputed EstimatorBreakdown, computed when None

    Returns:
        EfficiencySample
    """
    rule = rule or quad_rule(DEFAULT_DEGREE)
    data = solution.data
    breakdown = breakdown or estimate(solution, rule)
    terms = _error_terms(mesh, solution, case, rule)
    osc_f = oscillation_squared(mesh, data.f, rule)
    osc_yd = oscillation_squared(mesh, data.y_omega, rule)

    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(mesh.n_elements, size=min(n_samples, mesh.n_elements), replace=False))
    est_st = breakdown.indicators['state'].values
    est_adj = breakdown.indicators['adjoint'].values

    ratio_state, ratio_adjoint = [], []
    for t in chosen.tolist():
        patch = np.fromiter(star(mesh, t) | {t}, dtype=np.int64)
        norm = {key: math.sqrt(float(values[patch].sum())) for key, values in terms.items()}
        h = float(mesh.diameters[t])
        bound_st = norm['grad_y'] + norm['u'] + h * norm['y'] + math.sqrt(float(osc_f[patch].sum()))
        bound_adj = (norm['grad_p'] + norm['u'] + h * norm['p'] + h * norm['y']
                     + math.sqrt(float(osc_yd[patch].sum())))
        ratio_state.append(float(est_st[t]) / bound_st if bound_st > 0.0 else math.inf)
        ratio_adjoint.append(float(est_adj[t]) / bound_adj if bound_adj > 0.0 else math.inf)

    return EfficiencySample(tuple(chosen.tolist()), tuple(ratio_state), tuple(ratio_adjoint))


def write_indicator_dump(indicators, path):
    """Write `element_id value` lines."""
    with open(path, 'w', encoding='ascii') as fh:
        for t, value in enumerate(indicators.values.tolist()):
            fh.write(f"{t} {value!r}\n")
