__version__ = '1.0.0'
__author__ = 'Bilinear AFEM Development Team'
__title__ = 'Adaptive FEM for Bilinear Optimal Control'

from .main import run, get_result_summary
from .config import RunConfig, build_config
from . import mesh
from . import quadrature
from . import fem
from . import ocp
from . import estimators
from . import adaptivity
from . import benchmark
from . import utils

__all__ = [
    'run',
    'get_result_summary',
    'RunConfig',
    'build_config',
    'mesh',
    'quadrature',
    'fem',
    'ocp',
    'estimators',
    'adaptivity',
    'benchmark',
    'utils'
]
