"""
Command-line entry point.

    python -m bilinear_afem run --scheme fully --example lshape --max-ndof 100000
    python -m bilinear_afem verify --example lshape
    python -m bilinear_afem mesh-dump --example lshape --levels 2 --out mesh.txt
    python -m bilinear_afem indicator-dump --scheme semi --max-iters 5 --out eta.txt

Exit codes: 0 success, 1 I/O or other failure, 2 solver divergence,
3 verification failure, 4 configuration error.
"""

import argparse
import logging
import sys

from . import __version__
from .config import build_config
from .exceptions import BilinearAfemError, ConfigError, SolverError
from .main import (EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO, EXIT_OK, dump_indicators, dump_mesh,
                   get_result_summary, run, run_verify)

logger = logging.getLogger(__name__)

LOG_FORMAT = '[%(levelname)s] %(asctime)s - %(name)s - %(message)s'


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_run_options(parser):
    parser.add_argument('--scheme', help="discretization: 'fully' (P0 control) or 'semi' (variational)")
    parser.add_argument('--example', help="benchmark case (default 'lshape')")
    parser.add_argument('--marking', type=float, help='maximum-marking fraction in [0, 1) (default 0.5)')
    parser.add_argument('--uniform', action='store_true', default=None, help='refine every element')
    parser.add_argument('--max-ndof', dest='max_ndof', type=int, help='stop once ndof reaches this')
    parser.add_argument('--max-iters', dest='max_iterations', type=int, help='stop after this many refinements')
    parser.add_argument('--estimator-floor', dest='estimator_floor', type=float,
                        help='stop once the estimator drops below this')
    parser.add_argument('--quad-degree', dest='quad_degree', type=int, help='quadrature degree (1-20)')
    parser.add_argument('--levels', dest='initial_levels', type=int, help='uniform passes on the initial mesh')
    parser.add_argument('--newton-tol', dest='newton_tol', type=float, help='KKT residual target')
    parser.add_argument('--config', help='key = value config file; flags override it')


def build_parser():
    parser = _Parser(prog='bilinear_afem', description='Adaptive FEM for bilinear optimal control')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    parser.add_argument('-v', '--verbose', action='store_true', help='debug logging')
    parser.add_argument('-q', '--quiet', action='store_true', help='warnings and errors only')
    commands = parser.add_subparsers(dest='command', required=True, parser_class=_Parser)

    run_parser = commands.add_parser('run', help='run an adaptive (or uniform) benchmark')
    _add_run_options(run_parser)
    run_parser.add_argument('--out', help='results CSV path')
    run_parser.add_argument('--no-verify', dest='verify', action='store_false', default=None,
                            help='skip the finite-difference check (no exact errors reported)')

    verify_parser = commands.add_parser('verify', help='check a manufactured case by finite differences')
    verify_parser.add_argument('--example', default='lshape')

    mesh_parser = commands.add_parser('mesh-dump', help='write the initial mesh of an example')
    mesh_parser.add_argument('--example', default='lshape')
    mesh_parser.add_argument('--levels', type=int, default=0)
    mesh_parser.add_argument('--out', required=True)

    indicator_parser = commands.add_parser('indicator-dump',
                                           help='write element indicators of the last adaptive mesh')
    _add_run_options(indicator_parser)
    indicator_parser.add_argument('--tag', default='total', choices=('state', 'adjoint', 'control', 'total'))
    indicator_parser.add_argument('--out', required=True)
    return parser


def _config_from_args(args, with_output=True):
    overrides = {key: getattr(args, key, None) for key in (
        'scheme', 'example', 'marking', 'uniform', 'max_ndof', 'max_iterations', 'estimator_floor',
        'quad_degree', 'initial_levels', 'newton_tol')}
    if with_output:
        overrides['out'] = args.out
        overrides['verify'] = args.verify
    return build_config(args.config, **overrides)


def _configure_logging(args):
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(level=level, format=LOG_FORMAT)


def main(argv=None):
    args = build_parser().parse_args(argv)
    _configure_logging(args)

    try:
        if args.command == 'run':
            result = run(_config_from_args(args))
            print(get_result_summary(result))
            return result['exit_code']

        if args.command == 'verify':
            result = run_verify(args.example)
            print(('✅ ' if result['success'] else '❌ ') + result['message'])
            return result['exit_code']

        if args.command == 'mesh-dump':
            mesh = dump_mesh(args.example, args.levels, args.out)
            print(f"Mesh with {mesh.n_vertices} vertices and {mesh.n_elements} elements written to {args.out}")
            return EXIT_OK

        if args.command == 'indicator-dump':
            config = _config_from_args(args, with_output=False)
            step = dump_indicators(config, args.out, args.tag)
            print(f"{args.tag} indicators of {step.mesh.n_elements} elements written to {args.out}")
            return EXIT_OK

    except ConfigError as e:
        print(f"❌ Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as e:
        print(f"❌ Solver failed: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (OSError, BilinearAfemError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:
        logger.debug("Unexpected failure in '%s'", args.command, exc_info=True)
        print(f"❌ Unexpected error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_CONFIG


if __name__ == '__main__':
    sys.exit(main())
