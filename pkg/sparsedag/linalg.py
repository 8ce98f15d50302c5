import logging
import math
import warnings
from dataclasses import dataclass

import networkx as nx
import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike, NDArray

Matrix = NDArray[np.float64]
BoolMatrix = NDArray[np.bool_]

logger = logging.getLogger(__name__)

POWER_TOL = 1e-10
POWER_MAX_ITER = 10_000


class NonFiniteError(FloatingPointError):
    """Raised when a matrix computation produces NaN or Inf entries."""


def as_matrix(m: ArrayLike, name: str = "matrix") -> Matrix:
    """Validate and convert input to a 2-D float64 array with finite entries.

    Args:
        m: Anything numpy can turn into a 2-D array.
        name: Argument name used in error messages.

    Raises:
        ValueError: If the array isn't 2-D, is empty, or has non-finite entries.
    """
    out = np.asarray(m, dtype=np.float64)
    if out.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {out.shape}")
    if out.shape[0] == 0 or out.shape[1] == 0:
        raise ValueError(f"{name} must have positive dimensions, got {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} contains non-finite entries")
    return out


def as_square(m: ArrayLike, name: str = "matrix") -> Matrix:
    out = as_matrix(m, name)
    if out.shape[0] != out.shape[1]:
        raise ValueError(f"{name} must be square, got shape {out.shape}")
    return out


def _check_same_shape(m: Matrix, n: Matrix) -> None:
    if m.shape != n.shape:
        raise ValueError(f"Shape mismatch: {m.shape} vs {n.shape}")


def frobenius_norm(m: ArrayLike) -> float:
    return float(np.linalg.norm(as_matrix(m), "fro"))


def frobenius_inner(m: ArrayLike, n: ArrayLike) -> float:
    m, n = as_matrix(m, "m"), as_matrix(n, "n")
    _check_same_shape(m, n)
    return float(np.vdot(m, n))


def hadamard(m: ArrayLike, n: ArrayLike) -> Matrix:
    m, n = as_matrix(m, "m"), as_matrix(n, "n")
    _check_same_shape(m, n)
    return m * n


def zero_diagonal(m: Matrix) -> Matrix:
    """Return a copy of `m` whose diagonal is exactly zero."""
    out = np.array(m, dtype=np.float64, copy=True)
    np.fill_diagonal(out, 0.0)
    return out


def mat_exp(m: ArrayLike) -> Matrix:
    """Matrix exponential by scaling and squaring with Padé approximants.

    Delegates to `scipy.linalg.expm`, which selects the Padé order from the
    standard θ thresholds and falls back to order 13 with squaring for
    larger norms.

    Raises:
        ValueError: If the input isn't square or has non-finite entries.
        NonFiniteError: If the result overflows.
    """
    m = as_square(m)
    with np.errstate(over="ignore", invalid="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        out = scipy.linalg.expm(m)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(
            f"Matrix exponential overflowed (input Frobenius norm {np.linalg.norm(m):.3g})"
        )
    return out


@dataclass(frozen=True)
class SpectralRadius:
    """Result of `spectral_radius`.

    Attributes:
        value: The estimate of ρ(A).
        converged: Whether the returned value met the tolerance, either by
            power iteration or through the dense eigenvalue fallback.
        iterations: Power iterations used (0 for the nilpotent shortcut).
        method: "power", "eig" (some block fell back to a dense eigensolve)
            or "nilpotent".
    """

    value: float
    converged: bool
    iterations: int
    method: str = "power"

    def __float__(self) -> float:
        return float(self.value)


def _power_iteration(block: Matrix, tol: float, max_iter: int, shift: float) -> tuple[float, int]:
    """Perron root of an irreducible block, or NaN if `max_iter` runs out."""
    sigma = shift * float(np.linalg.norm(block, "fro"))
    shifted = block + sigma * np.eye(block.shape[0])
    x = np.ones(block.shape[0]) / np.sqrt(block.shape[0])
    for it in range(1, max_iter + 1):
        y = shifted @ x
        ratios = y / x
        upper, lower = float(ratios.max()), float(ratios.min())
        # bounds on ρ itself, not on ρ + σ
        if upper - lower <= tol * max(lower - sigma, 0.0):
            return max(0.5 * (upper + lower) - sigma, 0.0), it
        x = y / np.linalg.norm(y)
    return math.nan, max_iter


def spectral_radius(
    a: ArrayLike,
    tol: float = POWER_TOL,
    max_iter: int = POWER_MAX_ITER,
    shift: float = 1.0,
) -> SpectralRadius:
    """Perron root of a nonnegative matrix by shifted power iteration.

    ρ(A) is the largest Perron root over the strongly connected components
    of the support, so each cyclic component is iterated on its own, as
    B + σI with σ = `shift`·‖B‖_F from the all-ones vector. The shift makes
    the Perron root strictly dominant even for periodic supports such as
    cycles. A component stops when its Collatz-Wielandt bounds
    min (Bx)_i/x_i ≤ ρ + σ ≤ max (Bx)_i/x_i pin ρ to `tol` relative. A
    component that hasn't converged after `max_iter` iterations (strongly
    skewed weights make the gap tiny next to σ) is solved densely with
    `numpy.linalg.eigvals`. Nilpotent inputs (acyclic support) return
    exactly 0.

    Args:
        a: Square matrix with nonnegative entries.
        tol: Relative convergence tolerance.
        max_iter: Iteration cap per component before the dense fallback.
        shift: Shift σ as a multiple of the component's Frobenius norm.

    Raises:
        ValueError: If `a` isn't square, has negative or non-finite entries.
    """
    a = as_square(a, "a")
    if np.any(a < 0):
        raise ValueError("spectral_radius requires nonnegative entries")

    nonzero = a > 0
    if not nonzero.any() or is_dag_support(nonzero):
        return SpectralRadius(0.0, True, 0, "nilpotent")

    value, iterations, method = 0.0, 0, "power"
    for component in nx.strongly_connected_components(to_digraph(nonzero)):
        nodes = sorted(component)
        if len(nodes) == 1:
            value = max(value, float(a[nodes[0], nodes[0]]))
            continue
        block = a[np.ix_(nodes, nodes)]
        root, used = _power_iteration(block, tol, max_iter, shift)
        iterations += used
        if math.isnan(root):
            logger.debug(
                "Power iteration stalled on a %d-node component; using eigvals", len(nodes)
            )
            root = float(np.abs(np.linalg.eigvals(block)).max())
            method = "eig"
        value = max(value, root)
    return SpectralRadius(value, True, iterations, method)


def support(w: ArrayLike) -> BoolMatrix:
    """Exact support of `w`: entries that are not the floating-point zero.

    The diagonal is always excluded.
    """
    w = np.asarray(w)
    out = w != 0
    np.fill_diagonal(out, False)
    return out


def nnz(w: ArrayLike) -> int:
    """Number of off-diagonal entries that aren't exactly zero."""
    return int(support(w).sum())


def to_digraph(b: ArrayLike) -> nx.DiGraph:
    b = np.asarray(b, dtype=bool)
    if b.ndim != 2 or b.shape[0] != b.shape[1]:
        raise ValueError(f"Adjacency must be square, got shape {b.shape}")
    graph = nx.DiGraph()
    graph.add_nodes_from(range(b.shape[0]))
    graph.add_edges_from(zip(*np.nonzero(b)))
    return graph


def is_dag_support(b: ArrayLike) -> bool:
    """Whether a boolean adjacency has no directed cycle.

    networkx eliminates sources generation by generation (Kahn's algorithm).
    """
    return nx.is_directed_acyclic_graph(to_digraph(b))


def topological_order(b: ArrayLike) -> list[int]:
    """A topological order of an acyclic boolean adjacency.

    Raises:
        ValueError: If the support has a cycle.
    """
    try:
        return list(nx.topological_sort(to_digraph(b)))
    except nx.NetworkXUnfeasible as e:
        raise ValueError("Support has a directed cycle") from e
