import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from sparsedag.linalg import Matrix
from sparsedag.sem import CSV_FLOAT_FORMAT, save_adjacency_csv
from sparsedag.utils import jsonable

logger = logging.getLogger(__name__)

GRADIENT_COLUMNS = ["constraint", "param", "t_or_rho", "grad_fro_norm", "h_value"]
BENCHMARK_COLUMNS = [
    "method",
    "d",
    "seed",
    "lambda1",
    "delta",
    "shd",
    "nnz",
    "exact_zero_count",
    "sparsity",
    "tpr",
    "fdr",
    "final_h_exact",
    "final_h_smoothed",
    "status",
]
TIMING_COLUMNS = ["method", "d", "seed", "lambda1", "delta", "wall_seconds"]


@dataclass
class ReportBundle:
    """Everything an experiment produced.

    Attributes:
        experiment: Protocol name.
        tables: CSV tables by file stem, with their final column order.
        summary: Rows and aggregates for `summary.json`.
        manifest: Config echo, version, timestamps, and wall times.
        matrices: Fitted adjacencies by method, written as `W_<method>.csv`.
        reports: The run reports behind optimization rows, in row order.
    """

    experiment: str
    tables: dict[str, pd.DataFrame] = field(default_factory=dict)
    summary: dict[str, Any] = field(default_factory=dict)
    manifest: dict[str, Any] = field(default_factory=dict)
    matrices: dict[str, Matrix] = field(default_factory=dict)
    reports: list = field(default_factory=list)

    @property
    def error_rows(self) -> int:
        """Rows whose work item raised instead of producing a result."""
        count = 0
        for table in self.tables.values():
            if "status" in table.columns:
                count += int((table["status"] == "Error").sum())
        return count


def frame(rows: list[dict], columns: list[str]) -> pd.DataFrame:
    """Rows as a table with exactly `columns`, in order."""
    return pd.DataFrame(rows, columns=columns)


def write_csv(table: pd.DataFrame, path: Path) -> Path:
    table.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    logger.info("Wrote %s (%d rows)", path, len(table))
    return path


def write_json(payload: Any, path: Path) -> Path:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(jsonable(payload), handle, indent=2, sort_keys=True)
        handle.write("\n")
    logger.info("Wrote %s", path)
    return path


def _safe_name(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_.=" else "_" for c in name)


def write_bundle(bundle: ReportBundle, directory: str | Path) -> list[Path]:
    """Write the CSV tables, fitted matrices, summary and manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = [write_csv(table, directory / f"{stem}.csv") for stem, table in bundle.tables.items()]
    for method, w in bundle.matrices.items():
        path = directory / f"W_{_safe_name(method)}.csv"
        save_adjacency_csv(np.asarray(w), path)
        written.append(path)
    written.append(write_json(bundle.summary, directory / "summary.json"))
    bundle.manifest["files"] = sorted(p.name for p in written) + ["manifest.json"]
    written.append(write_json(bundle.manifest, directory / "manifest.json"))
    return written
