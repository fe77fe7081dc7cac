#!/usr/bin/env python3
"""
Run configuration, benchmark runs, CSV output and the command line.

Run with: pytest test_main.py
"""

import csv
import math
import sys
from pathlib import Path

import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent))

from bilinear_afem import ocp, utils
from bilinear_afem.cli import main
from bilinear_afem.config import RunConfig, build_config, parse_config_text
from bilinear_afem import cli
from bilinear_afem.exceptions import ConfigError, NewtonDivergenceError, SolverError
from bilinear_afem.main import (EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO, EXIT_OK, get_result_summary,
                                run, run_verify)
from bilinear_afem.mesh import read_mesh_dump


def read_csv_rows(path):
    with open(path, newline='', encoding='ascii') as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# ============================================================================
# Configuration
# ============================================================================

def test_parse_config_text():
    values = parse_config_text(
        '# benchmark settings\n'
        'SCHEME = "semi"\n'
        '\n'
        'max_ndof = 1e5   # trailing comment\n'
        'Uniform = yes\n'
        "marking = '0.25'\n"
    )
    assert values == {'scheme': 'semi', 'max_ndof': 100000, 'uniform': True, 'marking': 0.25}


@pytest.mark.parametrize('text', [
    'colour = blue',
    'scheme fully',
    'uniform = maybe',
    'max_ndof = 12.5',
    'marking = nan',
])
def test_parse_config_text_rejects(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_file_values_overridden_by_arguments(tmp_path):
    path = tmp_path / 'run.txt'
    path.write_text('scheme = semi\nmax_ndof = 500\nquad_degree = 12\n')
    config = build_config(path, max_ndof=1000, scheme=None)
    assert config.scheme == 'semi'
    assert config.max_ndof == 1000
    assert config.quad_degree == 12


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        build_config(tmp_path / 'absent.txt')


def test_run_config_validation():
    with pytest.raises(ConfigError, match='2D'):
        RunConfig(example='cube')
    with pytest.raises(ConfigError):
        RunConfig(scheme='mixed')
    with pytest.raises(ConfigError):
        RunConfig(marking=1.0)
    with pytest.raises(ConfigError):
        RunConfig(quad_degree=21)
    with pytest.raises(ConfigError):
        build_config(colour='blue')


def test_default_output_paths():
    assert RunConfig().output_path == 'results/fully_lshape_adaptive.csv'
    assert RunConfig(scheme='semi', uniform=True).output_path == 'results/semi_lshape_uniform.csv'
    assert RunConfig(uniform=True).marking_fraction == 0.0


def test_shipped_config_files_load():
    root = Path(__file__).parent / 'configs'
    for path in sorted(root.glob('*.txt')):
        assert isinstance(build_config(path), RunConfig)


# ============================================================================
# CSV helpers
# ============================================================================

def test_format_value():
    assert utils.format_value(7) == '7'
    assert utils.format_value(0.1) == '0.10000000000000001'
    assert utils.format_value(math.nan) == 'nan'
    assert float(utils.format_value(1.0 / 3.0)) == 1.0 / 3.0


def test_csv_recorder_round_trip(tmp_path):
    path = tmp_path / 'sub' / 'out.csv'
    recorder = utils.CsvRecorder(str(path), columns=('iter', 'value'))
    recorder.write({'iter': 0, 'value': 0.5})
    recorder.write({'iter': 1, 'value': math.nan})
    rows = read_csv_rows(path)
    assert rows[0] == {'iter': 0.0, 'value': 0.5}
    assert math.isnan(rows[1]['value'])
    assert recorder.rows_written == 2


# ============================================================================
# Runs
# ============================================================================

@pytest.mark.parametrize('scheme', ocp.SCHEMES)
def test_run_writes_one_row_per_iteration(scheme, tmp_path):
    out = tmp_path / f'{scheme}.csv'
    result = run(build_config(scheme=scheme, max_iterations=2, out=str(out)))
    assert result['success'], result['message']
    assert result['exit_code'] == EXIT_OK
    assert result['csv_path'] == str(out)

    header = out.read_text().splitlines()[0]
    assert tuple(header.split(',')) == utils.CSV_COLUMNS
    rows = read_csv_rows(out)
    assert [int(r['iter']) for r in rows] == [0, 1, 2]
    for row, record in zip(rows, result['records']):
        assert row['est_total'] == record.estimator.est_total
        assert row['err_total'] > 0.0
        assert row['effectivity'] == pytest.approx(row['est_total'] / row['err_total'], rel=1e-12)
    if scheme == 'semi':
        assert all(r['est_ct'] == 0.0 for r in rows)
    else:
        assert all(r['est_ct'] > 0.0 for r in rows)
    assert math.isfinite(result['effectivity'])


def test_run_without_verification_reports_no_errors(tmp_path):
    out = tmp_path / 'unverified.csv'
    result = run(build_config(max_iterations=1, verify=False, out=str(out)))
    assert result['success']
    rows = read_csv_rows(out)
    assert all(math.isnan(r['err_total']) and math.isnan(r['effectivity']) for r in rows)
    assert math.isnan(result['effectivity'])


def test_divergence_keeps_completed_rows(tmp_path, monkeypatch):
    real_solve = ocp.solve
    calls = {'n': 0}

    def flaky_solve(*args, **kwargs):
        calls['n'] += 1
        if calls['n'] == 2:
            raise NewtonDivergenceError("forced failure")
        return real_solve(*args, **kwargs)

    monkeypatch.setattr(ocp, 'solve', flaky_solve)
    out = tmp_path / 'partial.csv'
    result = run(build_config(max_iterations=4, out=str(out)))
    assert not result['success']
    assert result['exit_code'] == EXIT_DIVERGENCE
    assert len(result['records']) == 1
    assert len(read_csv_rows(out)) == 1
    assert '❌' in get_result_summary(result)


def failing_solve(monkeypatch, error, on_call):
    real_solve = ocp.solve
    calls = {'n': 0}

    def solve(*args, **kwargs):
        calls['n'] += 1
        if calls['n'] == on_call:
            raise error
        return real_solve(*args, **kwargs)

    monkeypatch.setattr(ocp, 'solve', solve)


def test_linear_solver_failure_keeps_completed_rows(tmp_path, monkeypatch):
    failing_solve(monkeypatch, SolverError("CG stalled", residual=1e-3, iterations=10), on_call=2)
    out = tmp_path / 'stalled.csv'
    result = run(build_config(max_iterations=4, out=str(out)))
    assert result['exit_code'] == EXIT_DIVERGENCE
    assert len(result['records']) == 1
    assert len(read_csv_rows(out)) == 1


def test_unexpected_error_becomes_failure_result(tmp_path, monkeypatch):
    failing_solve(monkeypatch, KeyError((0, 3)), on_call=2)
    out = tmp_path / 'broken.csv'
    result = run(build_config(max_iterations=4, out=str(out)))
    assert not result['success']
    assert result['exit_code'] == EXIT_IO
    assert len(result['records']) == 1
    assert result['csv_path'] == str(out)
    assert len(read_csv_rows(out)) == 1
    summary = get_result_summary(result)
    assert summary.startswith('❌ Unexpected error')
    assert '1 completed iterations' in summary


def test_result_summary():
    result = {
        'success': False, 'message': 'Configuration error: bad', 'exit_code': EXIT_CONFIG,
        'records': [], 'csv_path': None, 'rates': {}, 'timestamp': utils.get_timestamp(),
    }
    assert get_result_summary(result).startswith('❌')


def test_summary_of_successful_run(tmp_path):
    result = run(build_config(max_iterations=1, out=str(tmp_path / 'ok.csv')))
    summary = get_result_summary(result)
    assert summary.startswith('✅')
    assert 'Fitted rates' in summary
    assert 'Effectivity index' in summary


def test_run_verify():
    assert run_verify('lshape')['exit_code'] == EXIT_OK
    assert run_verify('cube')['exit_code'] == EXIT_CONFIG


# ============================================================================
# Command line
# ============================================================================

def test_cli_cube_is_config_error(capsys):
    assert main(['run', '--example', 'cube']) == EXIT_CONFIG
    assert '2D' in capsys.readouterr().err


def test_cli_bad_config_key(tmp_path):
    path = tmp_path / 'bad.txt'
    path.write_text('colour = blue\n')
    assert main(['run', '--config', str(path)]) == EXIT_CONFIG


def test_cli_usage_error_exits_with_config_code():
    with pytest.raises(SystemExit) as info:
        main(['run', '--no-such-flag'])
    assert info.value.code == EXIT_CONFIG


def test_cli_unexpected_error_maps_to_exit_code(monkeypatch, capsys):
    def broken(_example):
        raise ZeroDivisionError("division by zero")

    monkeypatch.setattr(cli, 'run_verify', broken)
    assert main(['verify']) == EXIT_IO
    err = capsys.readouterr().err
    assert '❌ Unexpected error: division by zero' in err


def test_cli_verify():
    assert main(['verify']) == EXIT_OK


def test_cli_mesh_dump(tmp_path):
    out = tmp_path / 'mesh.txt'
    assert main(['mesh-dump', '--levels', '1', '--out', str(out)]) == EXIT_OK
    assert read_mesh_dump(out).n_elements == 12


def test_cli_run_and_indicator_dump(tmp_path):
    csv_path = tmp_path / 'run.csv'
    assert main(['-q', 'run', '--scheme', 'semi', '--max-iters', '1', '--out', str(csv_path)]) == EXIT_OK
    assert len(read_csv_rows(csv_path)) == 2

    eta = tmp_path / 'eta.txt'
    assert main(['-q', 'indicator-dump', '--max-iters', '1', '--tag', 'control', '--out', str(eta)]) == EXIT_OK
    assert len(eta.read_text().splitlines()) > 12
    missing = tmp_path / 'none.txt'
    assert main(['-q', 'indicator-dump', '--scheme', 'semi', '--max-iters', '0', '--tag', 'control',
                 '--out', str(missing)]) == EXIT_CONFIG


if __name__ == '__main__':
    sys.exit(pytest.main([__file__, '-v']))
