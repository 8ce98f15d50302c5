import pytest
import itertools
import math
import numpy as np

from sparsedag.metrics import (
    assumption_report,
    check_beta_min,
    check_irrepresentable,
    max_beta_min_lambda,
    shd,
    structural_score,
)
from sparsedag.sem import Dataset, GraphSpec, generate_dataset


def all_supports(d: int):
    slots = [(i, j) for i in range(d) for j in range(d) if i != j]
    for bits in itertools.product([False, True], repeat=len(slots)):
        b = np.zeros((d, d), dtype=bool)
        for (i, j), on in zip(slots, bits):
            b[i, j] = on
        yield b


def brute_force_irrepresentable(sigma: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """γ and κ from the full Hessian of the loss in the off-diagonal entries of W."""
    d = sigma.shape[0]
    slots = [(i, j) for j in range(d) for i in range(d) if i != j]
    hessian = np.array(
        [[sigma[i, k] * (j == l) for (k, l) in slots] for (i, j) in slots], dtype=float
    )
    s = [n for n, (i, j) in enumerate(slots) if truth[i, j]]
    sc = [n for n, (i, j) in enumerate(slots) if not truth[i, j]]
    if not s:
        return 1.0, math.inf
    h_ss = hessian[np.ix_(s, s)]
    kappa = float(np.linalg.eigvalsh(h_ss)[0])
    if not sc:
        return 1.0, kappa
    cross = hessian[np.ix_(sc, s)] @ np.linalg.inv(h_ss)
    return 1.0 - float(np.abs(cross).sum(axis=1).max()), kappa


# Structural Hamming distance


def test_shd_examples():
    empty = np.zeros((3, 3), dtype=bool)
    chain = empty.copy()
    chain[0, 1] = chain[1, 2] = True
    assert shd(chain, chain) == 0
    assert shd(chain, empty) == 2
    assert shd(chain.T, chain) == 2
    flipped = chain.copy()
    flipped[0, 1], flipped[1, 0] = False, True
    assert shd(flipped, chain) == 1


def test_shd_ignores_diagonal():
    assert shd(np.eye(3, dtype=bool), np.zeros((3, 3), dtype=bool)) == 0


def test_shd_is_a_metric_on_three_nodes():
    supports = list(all_supports(3))
    rng = np.random.default_rng(0)
    for a in supports:
        assert shd(a, a) == 0
    for _ in range(2000):
        a, b, c = (supports[k] for k in rng.integers(len(supports), size=3))
        assert shd(a, b) == shd(b, a)
        assert shd(a, c) <= shd(a, b) + shd(b, c)
        assert (shd(a, b) == 0) == np.array_equal(a, b)


def test_shd_dimension_mismatch():
    with pytest.raises(ValueError):
        shd(np.zeros((2, 2)), np.zeros((3, 3)))


# Structural score


def test_score_of_truth():
    w = generate_dataset(GraphSpec(8, 10, seed=0), 10).w_true
    score = structural_score(w, w)
    assert score.shd == 0
    assert score.tpr == 1.0
    assert score.fdr == 0.0
    assert score.support_match and score.sign_consistent
    assert score.nnz == 10
    assert score.exact_zero_count == 8 * 7 - 10


def test_score_thresholds_small_entries():
    w_true = np.array([[0.0, 1.0], [0.0, 0.0]])
    w_est = np.array([[0.0, 0.9], [0.2, 0.0]])
    score = structural_score(w_est, w_true, tau=0.3)
    assert score.shd == 0
    assert score.nnz == 2
    assert score.support_match


def test_score_sign_flip():
    w_true = np.array([[0.0, 1.0], [0.0, 0.0]])
    score = structural_score(-w_true, w_true)
    assert score.support_match
    assert not score.sign_consistent


def test_score_empty_truth_and_estimate():
    score = structural_score(np.zeros((3, 3)), np.zeros((3, 3)))
    assert score.tpr == 1.0
    assert score.fdr == 0.0
    assert score.sparsity == 1.0


def test_score_rates():
    w_true = np.zeros((3, 3))
    w_true[0, 1] = w_true[1, 2] = 1.0
    w_est = np.zeros((3, 3))
    w_est[0, 1] = w_est[0, 2] = 1.0
    score = structural_score(w_est, w_true)
    assert score.tpr == 0.5
    assert score.fdr == 0.5
    assert score.shd == 2


@pytest.mark.parametrize("seed", range(5))
def test_score_invariant_under_halving_above_threshold(seed):
    w = generate_dataset(GraphSpec(10, 12, 0.7, 1.0, seed), 10).w_true
    assert structural_score(w, w).as_dict() == structural_score(w / 2, w).as_dict()


# Irrepresentability


def test_orthogonal_columns():
    x = np.sqrt(3) * np.eye(3)
    truth = np.zeros((3, 3), dtype=bool)
    truth[0, 1] = True
    report = check_irrepresentable(x, truth)
    assert report.gamma_hat == pytest.approx(1.0)
    assert report.kappa_hat == pytest.approx(1.0)
    assert report.checked_columns == [1]


def test_empty_truth():
    report = check_irrepresentable(np.eye(3), np.zeros((3, 3)))
    assert report.gamma_hat == 1.0
    assert report.kappa_hat == math.inf


@pytest.mark.parametrize("d,seed", itertools.product([2, 3, 4], range(5)))
def test_matches_full_hessian(d, seed):
    dataset = generate_dataset(GraphSpec(d, d - 1, seed=seed), 100)
    truth = dataset.w_true != 0
    report = check_irrepresentable(dataset, truth)
    gamma, kappa = brute_force_irrepresentable(dataset.gram, truth)
    assert report.gamma_hat == pytest.approx(gamma, rel=1e-8, abs=1e-10)
    assert report.kappa_hat == pytest.approx(kappa, rel=1e-8)


def test_singular_block_is_flagged():
    x = np.ones((10, 3))
    x[:, 2] = np.arange(10)
    truth = np.zeros((3, 3), dtype=bool)
    truth[0, 2] = truth[1, 2] = True
    with pytest.warns(RuntimeWarning):
        report = check_irrepresentable(x, truth)
    assert report.singular_columns == [2]
    assert report.checked_columns == []


# Beta-min and stability


def test_beta_min():
    w = np.array([[0.0, 0.5], [0.0, 0.0]])
    assert check_beta_min(w, 0.1, 1.0)
    assert not check_beta_min(w, 0.2, 1.0)
    assert max_beta_min_lambda(w, 1.0) == pytest.approx(0.125)
    with pytest.raises(ValueError):
        check_beta_min(w, 0.1, 0.0)


def test_beta_min_empty_support_warns():
    with pytest.warns(RuntimeWarning):
        assert check_beta_min(np.zeros((2, 2)), 0.1, 1.0)
    assert max_beta_min_lambda(np.zeros((2, 2)), 1.0) == math.inf


def test_assumption_report():
    dataset = generate_dataset(GraphSpec(6, 5, seed=3), 2000)
    report = assumption_report(dataset, dataset.w_true, 1e-3)
    assert report.kappa_hat > 0
    assert report.beta_min_ok
    assert not report.stability_ok
    assert set(report.as_dict()) == {
        "gamma_hat",
        "kappa_hat",
        "beta_min_ok",
        "stability_ok",
        "checked_columns",
        "singular_columns",
    }


def test_stability_for_independent_columns():
    x = np.sqrt(2) * np.eye(2)
    report = assumption_report(Dataset(x), np.zeros((2, 2)), 0.0)
    assert report.stability_ok
