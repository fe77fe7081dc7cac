"""
Run configuration

A run is described by a frozen RunConfig. Values come from the defaults
below, then from an optional plain-text config file, then from command
line flags, later sources overriding earlier ones.

Config files hold `key = value` lines; `#` starts a comment and blank lines
are ignored. Keys are case-insensitive and values may be quoted:

    # configs/fully_lshape.txt
    SCHEME = "fully"
    MAX_NDOF = 100000
"""

import dataclasses
import logging
import math
import os
from dataclasses import dataclass
from typing import Optional

from . import adaptivity, ocp
from .benchmark import EXAMPLES
from .exceptions import ConfigError
from .quadrature import DEFAULT_DEGREE, MAX_DEGREE

logger = logging.getLogger(__name__)

DEFAULT_OUTPUT_DIR = 'results'

_TRUE = {'1', 'true', 'yes', 'on'}
_FALSE = {'0', 'false', 'no', 'off'}


@dataclass(frozen=True)
class RunConfig:
    """
    Everything that determines a benchmark run. Runs are deterministic:
    equal configs give bit-identical records.
    """
    scheme: str = 'fully'
    example: str = 'lshape'
    marking: float = adaptivity.MARKING_FRACTION
    uniform: bool = False
    max_iterations: int = adaptivity.MAX_ITERATIONS
    max_ndof: int = adaptivity.MAX_NDOF
    estimator_floor: float = adaptivity.ESTIMATOR_FLOOR
    quad_degree: int = DEFAULT_DEGREE
    initial_levels: int = 2
    newton_tol: float = ocp.NEWTON_TOL
    newton_max_iter: int = ocp.NEWTON_MAX_ITER
    rate_tail: int = adaptivity.RATE_TAIL
    verify: bool = True
    out: Optional[str] = None

    def __post_init__(self):
        if self.scheme not in ocp.SCHEMES:
            raise ConfigError(f"Unknown scheme '{self.scheme}' (expected one of {', '.join(ocp.SCHEMES)})")
        if self.example == 'cube':
            raise ConfigError("Example 'cube' is three-dimensional; only 2D examples are supported")
        if self.example not in EXAMPLES:
            raise ConfigError(f"Unknown example '{self.example}' (available: {', '.join(EXAMPLES)})")
        if not 0.0 <= self.marking < 1.0:
            raise ConfigError(f"marking must lie in [0, 1), got {self.marking}")
        if not 1 <= self.quad_degree <= MAX_DEGREE:
            raise ConfigError(f"quad_degree must lie in [1, {MAX_DEGREE}], got {self.quad_degree}")
        if self.max_iterations < 0 or self.max_ndof < 1 or self.newton_max_iter < 1:
            raise ConfigError("max_iterations must be >= 0, max_ndof and newton_max_iter >= 1")
        if self.initial_levels < 0:
            raise ConfigError(f"initial_levels must be >= 0, got {self.initial_levels}")
        if not self.newton_tol > 0.0 or self.estimator_floor < 0.0:
            raise ConfigError("newton_tol must be positive and estimator_floor nonnegative")
        if self.rate_tail < 2:
            raise ConfigError(f"rate_tail must be >= 2, got {self.rate_tail}")

    @property
    def marking_fraction(self):
        """Fraction handed to mark_max; uniform runs mark everything."""
        return 0.0 if self.uniform else self.marking

    @property
    def output_path(self):
        if self.out:
            return self.out
        kind = 'uniform' if self.uniform or self.marking == 0.0 else 'adaptive'
        return os.path.join(DEFAULT_OUTPUT_DIR, f"{self.scheme}_{self.example}_{kind}.csv")

    def criteria(self):
        return adaptivity.StoppingCriteria(
            max_iterations=self.max_iterations,
            max_ndof=self.max_ndof,
            estimator_floor=self.estimator_floor,
        )


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _convert(key, raw):
    kind = _FIELDS[key].type
    text = raw.strip().strip('"').strip("'")
    if kind in (bool, 'bool'):
        lowered = text.lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ConfigError(f"'{key}' expects a boolean, got '{raw.strip()}'")
    if kind in (int, 'int'):
        try:
            number = float(text)
        except ValueError:
            raise ConfigError(f"'{key}' expects an integer, got '{raw.strip()}'") from None
        if not number.is_integer():
            raise ConfigError(f"'{key}' expects an integer, got '{raw.strip()}'")
        return int(number)
    if kind in (float, 'float'):
        try:
            value = float(text)
        except ValueError:
            raise ConfigError(f"'{key}' expects a number, got '{raw.strip()}'") from None
        if math.isnan(value):
            raise ConfigError(f"'{key}' must not be NaN")
        return value
    return text or None


def parse_config_text(text, source='<string>'):
    """
    Parse `key = value` lines into RunConfig field overrides.

    Raises:
        ConfigError: on malformed lines, unknown keys or bad values
    """
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got '{line}'")
        key, raw = line.split('=', 1)
        key = key.strip().lower().replace('-', '_')
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}' "
                              f"(known: {', '.join(sorted(_FIELDS))})")
        values[key] = _convert(key, raw)
    return values


def load_config_file(path):
    """Read overrides from a config file."""
    try:
        with open(path, encoding='utf-8') as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"Cannot read config file {path}: {exc}") from exc
    values = parse_config_text(text, source=str(path))
    logger.debug("Loaded %d settings from %s", len(values), path)
    return values


def build_config(config_file=None, **overrides):
    """
    Merge defaults, an optional config file and explicit overrides.

    Overrides set to None are ignored, so unset command line flags leave
    file values in place.

    Returns:
        RunConfig
    """
    values = load_config_file(config_file) if config_file else {}
    unknown = set(overrides) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"Unknown settings: {', '.join(sorted(unknown))}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)
