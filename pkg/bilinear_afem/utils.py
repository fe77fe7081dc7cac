import csv
import math
import os
from datetime import datetime

CSV_COLUMNS = (
    'iter', 'ndof', 'elements',
    'err_y_h1', 'err_p_h1', 'err_u_l2', 'err_total',
    'est_st', 'est_adj', 'est_ct', 'est_total',
    'effectivity', 'newton_iters', 'wall_time_s',
)


def get_timestamp():
    """
    Get current timestamp in a readable format.

    Returns:
        str: Current date and time
    """
    return datetime.now().strftime("%Y-%m-%d %H:%M:%S")


def ensure_parent_dir(path):
    """
    Create the directory that will hold `path`.

    Args:
        path: File path

    Returns:
        str: The same path
    """
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    return path


def format_value(value):
    """Integers as is, floats with 17 significant digits, NaN as 'nan'."""
    if isinstance(value, (bool, int)) and not isinstance(value, float):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return 'nan'
    return f"{value:.17g}"


class CsvRecorder:
    """
    Append rows to a CSV file as they arrive.

    The header is written on open and every row is flushed immediately,
    so a run that aborts midway leaves the rows it completed on disk.
    """

    def __init__(self, path, columns=CSV_COLUMNS):
        self.path = path
        self.columns = tuple(columns)
        self.rows_written = 0
        ensure_parent_dir(path)
        with open(path, 'w', newline='', encoding='ascii') as fh:
            csv.writer(fh).writerow(self.columns)

    def write(self, row):
        """
        Args:
            row: dict keyed by column name
        """
        with open(self.path, 'a', newline='', encoding='ascii') as fh:
            csv.writer(fh).writerow([format_value(row[c]) for c in self.columns])
        self.rows_written += 1
