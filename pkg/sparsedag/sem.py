import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from functools import cached_property
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd
import scipy.linalg
from numpy.typing import ArrayLike

from sparsedag.linalg import (
    Matrix,
    as_matrix,
    as_square,
    is_dag_support,
    spectral_radius,
    support,
    topological_order,
)

logger = logging.getLogger(__name__)

NEAR_CYCLIC_RHO = 0.999996
CSV_FLOAT_FORMAT = "%.17g"


class Stream(IntEnum):
    """Named random streams derived from one seed.

    Each stream is the `SeedSequence` child with spawn key `(stream,)`, so
    adding draws to one artifact never shifts the others.
    """

    GRAPH = 0
    WEIGHTS = 1
    NOISE = 2
    DIRECTION = 3


def stream_rng(seed: int, stream: Stream) -> np.random.Generator:
    """A PCG64 generator for one named stream of `seed`."""
    if not 0 <= seed < 2**64:
        raise ValueError(f"Seeds must be unsigned 64-bit integers, got {seed}")
    sequence = np.random.SeedSequence(seed, spawn_key=(int(stream),))
    return np.random.Generator(np.random.PCG64(sequence))


class DatasetFormatError(ValueError):
    """A CSV file couldn't be read as a numeric matrix.

    Attributes:
        line: 1-based line of the file at fault, if known.
        column: 1-based column at fault, if known.
    """

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        location = ""
        if line is not None:
            location = f" (line {line}" + (f", column {column})" if column else ")")
        super().__init__(message + location)
        self.line = line
        self.column = column


@dataclass(frozen=True)
class GraphSpec:
    """Parameters of a sparse Erdős–Rényi DAG with exactly `num_edges` edges.

    Attributes:
        d: Number of nodes.
        num_edges: Number of edges, at most d(d−1)/2.
        weight_low: Smallest edge magnitude.
        weight_high: Largest edge magnitude.
        seed: Seed of the graph and weight streams.
    """

    d: int
    num_edges: int
    weight_low: float = 0.5
    weight_high: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"d must be positive, got {self.d}")
        if not 0 <= self.num_edges <= self.capacity:
            raise ValueError(
                f"num_edges must lie in [0, {self.capacity}] for d={self.d}, "
                f"got {self.num_edges}"
            )
        if not 0 < self.weight_low <= self.weight_high:
            raise ValueError(
                f"Need 0 < weight_low <= weight_high, got "
                f"{self.weight_low}, {self.weight_high}"
            )

    @property
    def capacity(self) -> int:
        return self.d * (self.d - 1) // 2


@dataclass
class Dataset:
    """Samples of a linear SEM, with optional ground truth.

    Attributes:
        x: n×d sample matrix.
        w_true: Ground-truth weighted adjacency, entry (i, j) for edge i→j.
        provenance: Generator parameters or source file of the data.
        near_cyclic: Whether `w_true` is allowed to have a cyclic support.
    """

    x: Matrix
    w_true: Optional[Matrix] = None
    provenance: dict[str, Any] = field(default_factory=dict)
    near_cyclic: bool = False

    def __post_init__(self):
        self.x = as_matrix(self.x, "x")
        if self.w_true is not None:
            self.w_true = as_square(self.w_true, "w_true")
            if self.w_true.shape[0] != self.d:
                raise ValueError(
                    f"w_true is {self.w_true.shape[0]}×{self.w_true.shape[0]} "
                    f"but the data has {self.d} columns"
                )
            if np.any(np.diag(self.w_true) != 0):
                raise ValueError("w_true must have a zero diagonal")
            if not self.near_cyclic and not is_dag_support(support(self.w_true)):
                raise ValueError("w_true has a cyclic support")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @cached_property
    def gram(self) -> Matrix:
        """XᵀX/n."""
        return self.x.T @ self.x / self.n

    def centered(self) -> "Dataset":
        return Dataset(
            self.x - self.x.mean(axis=0),
            self.w_true,
            self.provenance | {"centered": True},
            self.near_cyclic,
        )


def sample_er_dag(spec: GraphSpec) -> Matrix:
    """Weighted DAG with exactly `spec.num_edges` edges.

    Draws a uniform node permutation as topological order, then a uniform
    subset of the order-consistent pairs, then magnitudes uniform in
    [weight_low, weight_high) with uniform signs.
    """
    d, e = spec.d, spec.num_edges
    graph_rng = stream_rng(spec.seed, Stream.GRAPH)
    order = graph_rng.permutation(d)
    rows, cols = np.triu_indices(d, 1)
    chosen = graph_rng.choice(rows.size, size=e, replace=False)

    weight_rng = stream_rng(spec.seed, Stream.WEIGHTS)
    magnitudes = weight_rng.uniform(spec.weight_low, spec.weight_high, size=e)
    signs = weight_rng.choice([-1.0, 1.0], size=e)

    w = np.zeros((d, d))
    w[order[rows[chosen]], order[cols[chosen]]] = signs * magnitudes
    return w


def near_cyclic_instance() -> Matrix:
    """The 3-cycle 0→1→2→0 with ρ(W∘W) = 0.999996."""
    weight = math.sqrt(NEAR_CYCLIC_RHO)
    w = np.zeros((3, 3))
    w[0, 1] = w[1, 2] = w[2, 0] = weight
    return w


def simulate_sem(
    w_true: ArrayLike,
    n: int,
    noise_std: float = 1.0,
    seed: int = 0,
    near_cyclic: bool = False,
) -> Dataset:
    """Draw n samples of the linear SEM x = xW + z with z ~ N(0, noise_std²I).

    Acyclic supports are sampled by forward substitution in topological
    order. With `near_cyclic`, a cyclic W is allowed as long as
    ρ(W∘W) < 1, and samples solve x(I − W) = z.

    Raises:
        ValueError: If the support is cyclic without `near_cyclic`, or if
            ρ(W∘W) ≥ 1.
    """
    w = as_square(w_true, "w_true")
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    if noise_std < 0:
        raise ValueError(f"noise_std must be nonnegative, got {noise_std}")
    d = w.shape[0]
    z = stream_rng(seed, Stream.NOISE).normal(0.0, noise_std, size=(n, d))

    if is_dag_support(support(w)):
        x = np.zeros((n, d))
        for j in topological_order(support(w)):
            x[:, j] = x @ w[:, j] + z[:, j]
    elif not near_cyclic:
        raise ValueError("w_true has a cyclic support; pass near_cyclic=True")
    else:
        rho = spectral_radius(w * w).value
        if rho >= 1:
            raise ValueError(f"ρ(W∘W) = {rho} must be below 1 for a cyclic SEM")
        x = scipy.linalg.solve((np.eye(d) - w).T, z.T).T

    provenance = {
        "generator": "linear_sem",
        "n": n,
        "noise_std": noise_std,
        "seed": seed,
        "near_cyclic": near_cyclic,
    }
    return Dataset(x, w, provenance, near_cyclic)


def generate_dataset(graph: GraphSpec, n: int, noise_std: float = 1.0) -> Dataset:
    """ER DAG plus SEM samples, all streams derived from `graph.seed`."""
    dataset = simulate_sem(sample_er_dag(graph), n, noise_std, graph.seed)
    dataset.provenance["graph"] = asdict(graph)
    return dataset


# --- CSV ingestion ---


def _read_csv_cells(path: str | Path, has_header: bool) -> pd.DataFrame:
    try:
        frame = pd.read_csv(
            path,
            header=0 if has_header else None,
            dtype=str,
            keep_default_na=False,
            encoding="utf-8",
        )
    except pd.errors.EmptyDataError as e:
        raise DatasetFormatError(f"{path}: file is empty", line=1) from e
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        line = int(match.group(1)) if match else None
        raise DatasetFormatError(f"{path}: ragged row ({e})", line=line) from e
    if frame.empty:
        raise DatasetFormatError(f"{path}: no data rows", line=2 if has_header else 1)
    return frame


def _parse_cell(cell: str) -> float:
    try:
        return float(cell)
    except ValueError:
        return math.nan


def _cells_to_matrix(frame: pd.DataFrame, path: str | Path, has_header: bool) -> Matrix:
    offset = 2 if has_header else 1  # file line of the first data row

    missing = frame.isna().to_numpy()
    if missing.any():
        row = int(np.argwhere(missing)[0][0])
        present = int((~missing[row]).sum())
        raise DatasetFormatError(
            f"{path}: ragged row with {present} fields, expected {frame.shape[1]}",
            line=row + offset,
        )

    columns = []
    for c, name in enumerate(frame.columns):
        # float() round-trips %.17g exactly; pd.to_numeric does not
        values = frame[name].map(_parse_cell)
        bad = ~np.isfinite(values.to_numpy(dtype=np.float64))
        if bad.any():
            row = int(np.argmax(bad))
            raise DatasetFormatError(
                f"{path}: non-numeric cell {frame[name].iloc[row]!r}",
                line=row + offset,
                column=c + 1,
            )
        columns.append(values.to_numpy(dtype=np.float64))
    return np.column_stack(columns)


def load_adjacency_csv(path: str | Path) -> Matrix:
    """Read a headerless d×d weighted adjacency.

    Raises:
        DatasetFormatError: If the file isn't a square numeric matrix with
            a zero diagonal.
    """
    w = _cells_to_matrix(_read_csv_cells(path, has_header=False), path, has_header=False)
    if w.shape[0] != w.shape[1]:
        raise DatasetFormatError(f"{path}: adjacency must be square, got {w.shape}")
    diagonal = np.flatnonzero(np.diag(w))
    if diagonal.size:
        i = int(diagonal[0])
        raise DatasetFormatError(f"{path}: nonzero diagonal entry", line=i + 1, column=i + 1)
    return w


def load_dataset_csv(
    path: str | Path,
    has_header: bool = True,
    center: bool = True,
    truth_path: Optional[str | Path] = None,
) -> Dataset:
    """Read an n×d sample matrix from a comma-separated UTF-8 file.

    Args:
        path: Data file; one sample per row.
        has_header: Whether the first row holds column names.
        center: Subtract column means.
        truth_path: Optional headerless d×d ground-truth adjacency.

    Raises:
        DatasetFormatError: On empty files, ragged rows or non-numeric cells,
            naming the line and column.
    """
    x = _cells_to_matrix(_read_csv_cells(path, has_header), path, has_header)
    w_true = None
    if truth_path is not None:
        w_true = load_adjacency_csv(truth_path)
        if w_true.shape[0] != x.shape[1]:
            raise DatasetFormatError(
                f"{truth_path}: ground truth is {w_true.shape[0]}×{w_true.shape[0]} "
                f"but {path} has {x.shape[1]} columns"
            )
    provenance = {"path": str(path), "truth_path": truth_path and str(truth_path)}
    dataset = Dataset(x, w_true, provenance)
    logger.info("Loaded %s: n=%d, d=%d", path, dataset.n, dataset.d)
    return dataset.centered() if center else dataset


def save_adjacency_csv(w: ArrayLike, path: str | Path) -> None:
    pd.DataFrame(np.asarray(w)).to_csv(
        path, header=False, index=False, float_format=CSV_FLOAT_FORMAT
    )


def save_dataset(dataset: Dataset, directory: str | Path) -> list[Path]:
    """Write `data.csv`, `truth.csv` (if known) and `provenance.json`.

    Returns:
        The paths written.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = [directory / "data.csv"]
    columns = [f"X{j + 1}" for j in range(dataset.d)]
    pd.DataFrame(dataset.x, columns=columns).to_csv(
        written[0], index=False, float_format=CSV_FLOAT_FORMAT
    )
    if dataset.w_true is not None:
        written.append(directory / "truth.csv")
        save_adjacency_csv(dataset.w_true, written[-1])
    written.append(directory / "provenance.json")
    with open(written[-1], "w") as f:
        json.dump(dataset.provenance, f, indent=2, sort_keys=True)
    return written
