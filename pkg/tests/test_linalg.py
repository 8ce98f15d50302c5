import pytest
import itertools
import numpy as np

from sparsedag.linalg import (
    NonFiniteError,
    as_matrix,
    frobenius_inner,
    frobenius_norm,
    hadamard,
    is_dag_support,
    mat_exp,
    nnz,
    spectral_radius,
    support,
    topological_order,
)


def random_symmetric(d: int, scale: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(d, d))
    a = (a + a.T) / 2
    return scale * a / np.linalg.norm(a, 2)


def three_cycle(weight: float) -> np.ndarray:
    w = np.zeros((3, 3))
    w[0, 1] = w[1, 2] = w[2, 0] = weight
    return w


# Validation


@pytest.mark.parametrize(
    "bad",
    [np.ones(3), np.ones((0, 3)), np.array([[1.0, np.nan]]), np.array([[np.inf]])],
)
def test_as_matrix_rejects(bad):
    with pytest.raises(ValueError):
        as_matrix(bad)


def test_elementwise_helpers():
    m = np.array([[1.0, -2.0], [3.0, 0.0]])
    n = np.array([[2.0, 1.0], [0.5, 4.0]])
    assert np.array_equal(hadamard(m, n), [[2.0, -2.0], [1.5, 0.0]])
    assert frobenius_inner(m, n) == pytest.approx(2.0 - 2.0 + 1.5)
    assert frobenius_norm(m) == pytest.approx(np.sqrt(14))
    with pytest.raises(ValueError):
        hadamard(m, np.ones((3, 3)))


# Matrix exponential


@pytest.mark.parametrize(
    "d,scale,seed", itertools.product([1, 3, 6, 10], [1e-3, 0.5, 3.0, 12.0], [0, 1])
)
def test_mat_exp_matches_eigendecomposition(d, scale, seed):
    a = random_symmetric(d, scale, seed)
    values, vectors = np.linalg.eigh(a)
    expected = vectors @ np.diag(np.exp(values)) @ vectors.T
    error = np.linalg.norm(mat_exp(a) - expected) / np.linalg.norm(expected)
    assert error <= 1e-10


def test_mat_exp_nilpotent():
    n = np.array([[0.0, 1.0, 2.0], [0.0, 0.0, 3.0], [0.0, 0.0, 0.0]])
    assert np.allclose(mat_exp(n), np.eye(3) + n + n @ n / 2, rtol=0, atol=1e-14)


def test_mat_exp_zero_is_identity():
    assert np.array_equal(mat_exp(np.zeros((4, 4))), np.eye(4))


def test_mat_exp_overflow():
    with pytest.raises(NonFiniteError):
        mat_exp(1000 * np.eye(3))


@pytest.mark.parametrize("seed", range(5))
def test_mat_exp_commutes_with_similarity(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(scale=0.8, size=(6, 6))
    p = np.eye(6) + 0.2 * rng.normal(size=(6, 6))
    p_inv = np.linalg.inv(p)
    left = mat_exp(p @ a @ p_inv)
    right = p @ mat_exp(a) @ p_inv
    assert np.linalg.norm(left - right) <= 1e-9 * np.linalg.norm(right)


# Spectral radius


def test_spectral_radius_dag_is_exactly_zero():
    a = np.triu(np.ones((5, 5)), k=1)
    result = spectral_radius(a)
    assert result.value == 0.0
    assert result.converged
    assert result.iterations == 0


@pytest.mark.parametrize("weight", [0.1, 0.5, 0.999996, 2.0])
def test_spectral_radius_of_cycle(weight):
    result = spectral_radius(three_cycle(weight))
    assert result.converged
    assert float(result) == pytest.approx(weight, rel=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_spectral_radius_matches_eigenvalues(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(6, 6)) * (rng.uniform(size=(6, 6)) < 0.5)
    expected = np.max(np.abs(np.linalg.eigvals(a)))
    assert spectral_radius(a).value == pytest.approx(expected, rel=1e-6, abs=1e-12)


def test_spectral_radius_of_skewed_cycle():
    a = np.zeros((3, 3))
    a[0, 1], a[1, 2], a[2, 0] = 1e3, 1e-3, 1e-3
    result = spectral_radius(a)
    assert result.converged
    assert result.value == pytest.approx(0.1, rel=1e-7)


def test_spectral_radius_small_cycle_next_to_heavy_edge():
    a = np.zeros((4, 4))
    a[0, 1] = a[1, 0] = 1e-4
    a[2, 3] = 1e3
    assert spectral_radius(a).value == pytest.approx(1e-4, rel=1e-9)


@pytest.mark.parametrize("seed", range(20))
def test_spectral_radius_matches_eigenvalues_on_cyclic_matrices(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(3, 9))
    a = 10.0 ** rng.uniform(-3, 3, size=(d, d)) * (rng.uniform(size=(d, d)) < 0.3)
    np.fill_diagonal(a, 0.0)
    order = rng.permutation(d)
    a[order, np.roll(order, 1)] = 10.0 ** rng.uniform(-3, 3, size=d)
    expected = np.max(np.abs(np.linalg.eigvals(a)))
    assert spectral_radius(a).value == pytest.approx(expected, rel=1e-6)


def test_spectral_radius_converts_to_builtin_float():
    assert type(float(spectral_radius(three_cycle(0.5)))) is float
    assert type(float(spectral_radius(np.zeros((2, 2))))) is float


def test_spectral_radius_rejects_negative_entries():
    with pytest.raises(ValueError):
        spectral_radius(-np.eye(2))


def test_spectral_radius_agrees_with_dag_check():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        d = int(rng.integers(2, 6))
        a = rng.uniform(0.1, 1.0, size=(d, d)) * (rng.uniform(size=(d, d)) < 0.3)
        np.fill_diagonal(a, 0.0)
        assert (spectral_radius(a).value > 0) == (not is_dag_support(a > 0))


# Supports


def test_support_ignores_diagonal_and_counts_exact_zeros():
    w = np.array([[1.0, 0.0, -0.0], [1e-300, 0.0, 2.0], [0.0, 0.0, 5.0]])
    assert support(w).tolist() == [
        [False, False, False],
        [True, False, True],
        [False, False, False],
    ]
    assert nnz(w) == 2


def test_topological_order():
    b = np.zeros((4, 4), dtype=bool)
    b[2, 0] = b[0, 3] = b[1, 3] = True
    order = topological_order(b)
    assert order.index(2) < order.index(0) < order.index(3)
    assert order.index(1) < order.index(3)
    with pytest.raises(ValueError):
        topological_order(three_cycle(1.0) > 0)
