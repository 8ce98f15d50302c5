import math
from collections.abc import Mapping
from typing import Any, Optional


def format_value(value: Any) -> str:
    if isinstance(value, float) and not isinstance(value, bool):
        return "nan" if math.isnan(value) else f"{value:.6g}"
    return str(value)


def str_table(rows: list[list], header: Optional[list] = None) -> str:
    """Format rows into a table with aligned columns.

    Args:
        rows: List of data rows
        header: Optional header row

    Returns:
        Formatted table string
    """
    all_rows = [header] + rows if header else rows
    if not all_rows:
        return ""

    cells = [[format_value(item) for item in row] for row in all_rows]
    num_cols = len(cells[0])
    col_widths = [max(len(row[i]) for row in cells) for i in range(num_cols)]

    formatted_rows = []
    for i, row in enumerate(cells):
        formatted_rows.append(
            " | ".join(f"{item:<{col_widths[j]}}" for j, item in enumerate(row)).rstrip()
        )
        if i == 0 and header:
            formatted_rows.append("-" * len(formatted_rows[-1]))

    return "\n".join(formatted_rows)


def str_record(record: Mapping[str, Any]) -> str:
    """One `key=value` line per field."""
    return "\n".join(f"{key}={format_value(value)}" for key, value in record.items())


def jsonable(value: Any) -> Any:
    """Recursively convert numpy scalars, paths and non-finite floats for JSON."""
    if isinstance(value, Mapping):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if hasattr(value, "tolist"):
        return jsonable(value.tolist())
    if isinstance(value, float) and not math.isfinite(value):
        return None if math.isnan(value) else ("inf" if value > 0 else "-inf")
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    return str(value)
