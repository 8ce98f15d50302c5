import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike

from sparsedag.linalg import BoolMatrix, as_square, support
from sparsedag.objective import gram_matrix, stability_threshold
from sparsedag.optim import threshold_support
from sparsedag.sem import Dataset

logger = logging.getLogger(__name__)

# Smallest eigenvalue below which a parent block counts as singular
SINGULAR_TOL = 1e-12


def _as_adjacency(b: ArrayLike, name: str) -> BoolMatrix:
    out = np.asarray(b, dtype=bool).copy()
    if out.ndim != 2 or out.shape[0] != out.shape[1]:
        raise ValueError(f"{name} must be a square adjacency, got shape {out.shape}")
    np.fill_diagonal(out, False)
    return out


def _check_same_d(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"Dimension mismatch: {a.shape} vs {b.shape}")


def shd(est: ArrayLike, truth: ArrayLike) -> int:
    """Structural Hamming distance between two supports.

    Counts unordered node pairs whose edge state differs, so a reversed edge
    costs one, as does an extra or a missing edge.
    """
    est, truth = _as_adjacency(est, "est"), _as_adjacency(truth, "truth")
    _check_same_d(est, truth)
    forward = est != truth
    backward = est.T != truth.T
    return int(np.triu(forward | backward, k=1).sum())


@dataclass(frozen=True)
class StructuralScore:
    """Support-level comparison of an estimate with the truth.

    `nnz` and `exact_zero_count` are taken on the raw estimate; the other
    fields on its `tau`-thresholded support.
    """

    shd: int
    tpr: float
    fdr: float
    nnz: int
    exact_zero_count: int
    support_match: bool
    sign_consistent: bool
    true_positives: int
    true_edges: int

    @property
    def sparsity(self) -> float:
        total = self.nnz + self.exact_zero_count
        return self.exact_zero_count / total if total else 1.0

    def as_dict(self) -> dict[str, float | int | bool]:
        return {
            "shd": self.shd,
            "nnz": self.nnz,
            "exact_zero_count": self.exact_zero_count,
            "sparsity": self.sparsity,
            "tpr": self.tpr,
            "fdr": self.fdr,
            "support_match": self.support_match,
            "sign_consistent": self.sign_consistent,
        }


def structural_score(w_est: ArrayLike, w_true: ArrayLike, tau: float = 0.3) -> StructuralScore:
    w_est, w_true = as_square(w_est, "W_est"), as_square(w_true, "W_true")
    _check_same_d(w_est, w_true)
    d = w_est.shape[0]

    raw_nnz = int(support(w_est).sum())
    est = threshold_support(w_est, tau)
    truth = support(w_true)

    true_positives = int((est & truth).sum())
    predicted = int(est.sum())
    true_edges = int(truth.sum())
    match = bool(np.array_equal(est, truth))
    signs_agree = bool(np.array_equal(np.sign(w_est[truth]), np.sign(w_true[truth])))
    return StructuralScore(
        shd=shd(est, truth),
        tpr=true_positives / true_edges if true_edges else 1.0,
        fdr=(predicted - true_positives) / predicted if predicted else 0.0,
        nnz=raw_nnz,
        exact_zero_count=d * d - d - raw_nnz,
        support_match=match,
        sign_consistent=match and signs_agree,
        true_positives=true_positives,
        true_edges=true_edges,
    )


@dataclass
class AssumptionReport:
    """Empirical estimates of the support-recovery assumptions.

    Attributes:
        gamma_hat: Irrepresentability margin, 1 − max over columns of
            ‖Σ_{SᶜS}Σ_{SS}⁻¹‖_∞. Positive means the condition holds.
        kappa_hat: Smallest eigenvalue over the parent blocks Σ_{SS}.
        beta_min_ok: Whether every true weight clears 4λ₁/κ̂.
        stability_ok: Whether λ₁ ≥ ‖∇fit(0)‖_∞.
        checked_columns: Columns with a nonempty, nonsingular parent block.
        singular_columns: Columns whose parent block was singular.
    """

    gamma_hat: float
    kappa_hat: float
    beta_min_ok: Optional[bool] = None
    stability_ok: Optional[bool] = None
    checked_columns: list[int] = field(default_factory=list)
    singular_columns: list[int] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "gamma_hat": self.gamma_hat,
            "kappa_hat": self.kappa_hat,
            "beta_min_ok": self.beta_min_ok,
            "stability_ok": self.stability_ok,
            "checked_columns": len(self.checked_columns),
            "singular_columns": self.singular_columns,
        }


def check_irrepresentable(x: Dataset | ArrayLike, truth: ArrayLike) -> AssumptionReport:
    """Estimate γ and κ from the sample covariance.

    The Hessian of the least-squares loss in vec(W) is block diagonal with
    Σ = XᵀX/n repeated once per column, so the condition is checked column
    by column on the parent set S_j of node j. Columns without parents are
    skipped; singular blocks are flagged and skipped.

    Raises:
        ValueError: If `truth` doesn't match the data's dimension.
    """
    sigma = gram_matrix(x)
    truth = _as_adjacency(truth, "truth")
    _check_same_d(sigma, truth)
    d = sigma.shape[0]

    worst = 0.0
    kappa = math.inf
    checked, singular = [], []
    for j in range(d):
        parents = np.flatnonzero(truth[:, j])
        if parents.size == 0:
            continue
        block = sigma[np.ix_(parents, parents)]
        eigenvalues = scipy.linalg.eigvalsh(block)
        if eigenvalues[0] <= SINGULAR_TOL * max(1.0, eigenvalues[-1]):
            singular.append(j)
            continue
        others = np.setdiff1d(np.arange(d), np.append(parents, j))
        kappa = min(kappa, float(eigenvalues[0]))
        checked.append(j)
        if others.size == 0:
            continue
        cross = scipy.linalg.solve(block, sigma[np.ix_(parents, others)], assume_a="pos").T
        worst = max(worst, float(np.abs(cross).sum(axis=1).max()))

    if singular:
        warnings.warn(
            f"Singular parent covariance for columns {singular}; they were skipped",
            RuntimeWarning,
        )
    return AssumptionReport(
        gamma_hat=1.0 - worst,
        kappa_hat=kappa,
        checked_columns=checked,
        singular_columns=singular,
    )


def check_beta_min(w_true: ArrayLike, lambda1: float, kappa_hat: float) -> bool:
    """Whether min over the true support of |W*_ij| is at least 4λ₁/κ̂.

    An empty support passes vacuously, with a warning.
    """
    if not kappa_hat > 0:
        raise ValueError(f"kappa_hat must be positive, got {kappa_hat}")
    w_true = as_square(w_true, "W_true")
    magnitudes = np.abs(w_true[support(w_true)])
    if magnitudes.size == 0:
        warnings.warn("beta-min check on an empty support is vacuous", RuntimeWarning)
        return True
    return bool(magnitudes.min() >= 4 * lambda1 / kappa_hat)


def max_beta_min_lambda(w_true: ArrayLike, kappa_hat: float) -> float:
    """Largest λ₁ that still passes `check_beta_min`."""
    if not kappa_hat > 0:
        raise ValueError(f"kappa_hat must be positive, got {kappa_hat}")
    w_true = as_square(w_true, "W_true")
    magnitudes = np.abs(w_true[support(w_true)])
    return math.inf if magnitudes.size == 0 else float(magnitudes.min() * kappa_hat / 4)


def check_stability(x: Dataset | ArrayLike, lambda1: float) -> bool:
    return lambda1 >= stability_threshold(x)


def assumption_report(
    x: Dataset | ArrayLike, w_true: ArrayLike, lambda1: float
) -> AssumptionReport:
    report = check_irrepresentable(x, support(as_square(w_true, "W_true")))
    if report.kappa_hat > 0 and math.isfinite(report.kappa_hat):
        report.beta_min_ok = check_beta_min(w_true, lambda1, report.kappa_hat)
    elif math.isinf(report.kappa_hat):
        report.beta_min_ok = True
    else:
        report.beta_min_ok = False
    report.stability_ok = check_stability(x, lambda1)
    logger.info(
        "Assumptions: gamma=%.3g kappa=%.3g beta_min=%s stability=%s",
        report.gamma_hat,
        report.kappa_hat,
        report.beta_min_ok,
        report.stability_ok,
    )
    return report
