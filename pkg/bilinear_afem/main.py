import logging
import math

from . import adaptivity, utils
from .benchmark import get_case, verify_case
from .estimators import write_indicator_dump
from .exceptions import (BilinearAfemError, ConfigError, NewtonDivergenceError, SolverError,
                         VerificationError)
from .mesh import write_mesh_dump
from .quadrature import quad_rule

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_IO = 1
EXIT_DIVERGENCE = 2
EXIT_VERIFICATION = 3
EXIT_CONFIG = 4


def _failure(message, exit_code, records=None, csv_path=None):
    return {
        'success': False,
        'message': message,
        'exit_code': exit_code,
        'records': list(records or []),
        'csv_path': csv_path,
        'rates': {},
        'timestamp': utils.get_timestamp(),
    }


def run(config):
    """
    Main benchmark function - runs the complete adaptive experiment.

    This function:
    1. Builds the manufactured case and checks it against finite differences
    2. Runs the adaptive loop (or the uniform baseline)
    3. Writes one CSV row per iteration as it goes
    4. Fits convergence rates over the last iterations

    Exact errors are only reported for a verified case; with verification
    disabled the error columns hold NaN.

    Args:
        config: RunConfig

    Returns:
        dict: Run results with keys:
            - success: bool
            - message: str (status message)
            - exit_code: int (0 success, 2 divergence, 3 verification
              failure, 4 config error, 1 I/O or other failure)
            - records: list of LoopRecord
            - csv_path: str or None
            - rates: dict of fitted slopes
            - timestamp: str
            - effectivity: final effectivity index (NaN without errors)
    """
    recorder = None
    completed = []

    def on_record(record):
        completed.append(record)
        recorder.write(record.as_row())

    try:
        case = get_case(config.example)
        exact = None
        if config.verify:
            verify_case(case)
            exact = case
        else:
            logger.warning("Case '%s' was not verified; exact errors will not be reported", case.name)

        mesh = case.build_mesh(config.initial_levels)
        recorder = utils.CsvRecorder(config.output_path)
        records = adaptivity.adaptive_loop(
            config.scheme, case.problem_data, mesh,
            criteria=config.criteria(),
            fraction=config.marking_fraction,
            exact=exact,
            rule=quad_rule(config.quad_degree),
            tol=config.newton_tol,
            max_iter=config.newton_max_iter,
            on_record=on_record,
        )

    except ConfigError as e:
        return _failure(f'Configuration error: {e}', EXIT_CONFIG)
    except VerificationError as e:
        return _failure(f'Manufactured case failed verification: {e}', EXIT_VERIFICATION)
    except NewtonDivergenceError as e:
        return _failure(f'Newton iteration diverged: {e}', EXIT_DIVERGENCE, e.records,
                        recorder.path if recorder else None)
    except SolverError as e:
        return _failure(f'Linear solver failed: {e}', EXIT_DIVERGENCE, completed,
                        recorder.path if recorder else None)
    except OSError as e:
        return _failure(f'Cannot write results: {e}', EXIT_IO)
    except BilinearAfemError as e:
        return _failure(f'Run failed: {e}', EXIT_IO, completed, recorder.path if recorder else None)
    except Exception as e:
        logger.error("Unexpected failure after %d iterations: %r", len(completed), e,
                     exc_info=logger.isEnabledFor(logging.DEBUG))
        return _failure(f'Unexpected error: {e}', EXIT_IO, completed, recorder.path if recorder else None)

    rates = adaptivity.rate_summary(records, config.rate_tail)
    final = records[-1]
    effectivity = final.errors.effectivity if final.errors else math.nan
    return {
        'success': True,
        'message': f'{len(records)} iterations, final ndof {final.ndof}',
        'exit_code': EXIT_OK,
        'records': records,
        'csv_path': recorder.path,
        'rates': rates,
        'timestamp': utils.get_timestamp(),
        'effectivity': effectivity,
    }


def run_verify(example):
    """
    Check a benchmark case against finite differences.

    Returns:
        dict with 'success', 'message', 'exit_code', 'report', 'timestamp'
    """
    try:
        report = verify_case(get_case(example))
    except ConfigError as e:
        return {'success': False, 'message': f'Configuration error: {e}', 'exit_code': EXIT_CONFIG,
                'report': None, 'timestamp': utils.get_timestamp()}
    except VerificationError as e:
        return {'success': False, 'message': f'Verification failed: {e}', 'exit_code': EXIT_VERIFICATION,
                'report': None, 'timestamp': utils.get_timestamp()}
    return {
        'success': True,
        'message': (f'Verified at {report.n_points} points: gradient error {report.gradient_error:.2e}, '
                    f'Laplacian error {report.laplacian_error:.2e}, '
                    f'boundary values {report.boundary_error:.2e}'),
        'exit_code': EXIT_OK,
        'report': report,
        'timestamp': utils.get_timestamp(),
    }


def dump_mesh(example, levels, out):
    """Write the initial mesh of an example, refined uniformly `levels` times."""
    mesh = get_case(example).build_mesh(levels)
    write_mesh_dump(mesh, utils.ensure_parent_dir(out))
    logger.info("Wrote mesh with %d vertices and %d elements to %s", mesh.n_vertices, mesh.n_elements, out)
    return mesh


def dump_indicators(config, out, tag='total'):
    """
    Run the adaptive loop under `config` and write the indicators of the
    last mesh as `element_id value` lines.

    Returns:
        the final AdaptiveStep
    """
    case = get_case(config.example)
    last = None
    for last in adaptivity.iterate_adaptive(
            config.scheme, case.problem_data, case.build_mesh(config.initial_levels),
            criteria=config.criteria(), fraction=config.marking_fraction,
            rule=quad_rule(config.quad_degree), tol=config.newton_tol, max_iter=config.newton_max_iter):
        pass
    indicators = last.estimator.indicators.get(tag)
    if indicators is None:
        raise ConfigError(f"No '{tag}' indicators for the {config.scheme} scheme")
    write_indicator_dump(indicators, utils.ensure_parent_dir(out))
    logger.info("Wrote %d %s indicators to %s", len(indicators), tag, out)
    return last


def get_result_summary(result):
    """
    Create a human-readable summary of run results.

    Args:
        result: Result dict from run()

    Returns:
        str: Formatted summary text
    """
    if not result['success']:
        summary = f"❌ {result['message']}"
        if result.get('records'):
            summary += f"\n{len(result['records'])} completed iterations written to {result['csv_path']}"
        return summary

    records = result['records']
    final = records[-1]
    summary = "✅ Run Complete\n\n"
    summary += f"Timestamp: {result['timestamp']}\n"
    summary += f"Iterations: {len(records)}\n"
    summary += f"Final ndof: {final.ndof} ({final.elements} elements)\n"
    summary += f"Final estimator: {final.estimator.est_total:.6e}\n"
    if final.errors is not None:
        summary += f"Final error: {final.errors.err_total:.6e}\n"
        summary += f"Effectivity index: {final.errors.effectivity:.4f}\n"
    summary += f"Results CSV: {result['csv_path']}\n\n"

    summary += "--- Fitted rates vs ndof ---\n"
    for name, slope in result['rates'].items():
        shown = 'n/a' if math.isnan(slope) else f"{slope:+.3f}"
        summary += f"{name:>10}: {shown}\n"
    return summary
