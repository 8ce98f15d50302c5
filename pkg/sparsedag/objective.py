import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

from sparsedag.constraints import ConstraintSpec
from sparsedag.linalg import Matrix, as_square, zero_diagonal
from sparsedag.sem import Dataset


@dataclass(frozen=True)
class AlmParams:
    """Multiplier μ and penalty ρ of the augmented Lagrangian."""

    mu: float = 0.0
    rho: float = 1.0

    def __post_init__(self):
        if not self.mu >= 0:
            raise ValueError(f"mu must be nonnegative, got {self.mu}")
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")


@dataclass
class ObjectiveEval:
    """The smooth part L̃ = fit + μh + (ρ/2)h² of the objective at a point.

    Attributes:
        total: L̃(W), +inf when not finite.
        fit: Least-squares loss.
        h: Constraint value.
        grad: Gradient of L̃ (None when not requested). The ℓ₁ term isn't
            part of it.
        finite: Whether every part is finite.
        nonsmooth: Whether the constraint used a subgradient.
        fit_grad: Gradient of the fit term alone, alongside `grad`.
        kink_slope: (μ + ρh) times the constraint kink, for smoothed kinds.
    """

    total: float
    fit: float
    h: float
    grad: Matrix | None
    finite: bool = True
    nonsmooth: bool = False
    fit_grad: Matrix | None = None
    kink_slope: Matrix | None = None


def gram_matrix(x: Dataset | ArrayLike) -> Matrix:
    """XᵀX/n, cached on datasets."""
    if isinstance(x, Dataset):
        return x.gram
    x = np.asarray(x, dtype=np.float64)
    return x.T @ x / x.shape[0]


def _check_dims(w: Matrix, gram: Matrix) -> None:
    if w.shape != gram.shape:
        raise ValueError(f"W is {w.shape} but the data has {gram.shape[0]} columns")


def loss_fit(w: ArrayLike, x: Dataset | ArrayLike) -> tuple[float, Matrix]:
    """Least-squares loss (1/2n)‖X − XW‖²_F and its gradient.

    Evaluated through the Gram matrix Σ = XᵀX/n as ½tr((I−W)ᵀΣ(I−W)), with
    gradient −Σ(I − W) = −(1/n)Xᵀ(X − XW), diagonal zeroed.

    Raises:
        ValueError: If W and the data don't have matching dimensions.
    """
    w = as_square(w, "W")
    gram = gram_matrix(x)
    _check_dims(w, gram)
    residual = np.eye(w.shape[0]) - w
    sigma_residual = gram @ residual
    value = 0.5 * float(np.vdot(residual, sigma_residual))
    return max(value, 0.0), zero_diagonal(-sigma_residual)


def alm_eval(
    w: ArrayLike,
    x: Dataset | ArrayLike,
    spec: ConstraintSpec,
    params: AlmParams,
    subgradient: bool = False,
    gradient: bool = True,
) -> ObjectiveEval:
    """Evaluate the smooth augmented-Lagrangian objective.

    ∇L̃ = ∇fit + (μ + ρh)∇h. The ℓ₁ term belongs to the proximal step and
    isn't included.

    Args:
        w: Weighted adjacency with zero diagonal.
        x: Samples.
        spec: Constraint to penalize.
        params: Current μ and ρ.
        subgradient: Allow the non-smooth kinds, using their sign(0) = 0
            subgradient.
        gradient: Also compute the gradient.

    Raises:
        ValueError: If `spec` is non-smooth and `subgradient` isn't set.
    """
    if not spec.smooth and not subgradient:
        raise ValueError(f"{spec.kind} isn't smooth; pass subgradient=True to use it")
    fit, fit_grad = loss_fit(w, x)
    constraint = spec.build().evaluate(w, gradient=gradient)
    h = constraint.value
    if not constraint.finite:
        return ObjectiveEval(math.inf, fit, h, None, finite=False)

    total = fit + params.mu * h + 0.5 * params.rho * h * h
    grad = kink_slope = None
    weight = params.mu + params.rho * h
    if gradient:
        grad = fit_grad + weight * constraint.gradient
        if constraint.kink is not None:
            kink_slope = weight * constraint.kink
    finite = math.isfinite(total) and (grad is None or bool(np.all(np.isfinite(grad))))
    return ObjectiveEval(
        total if finite else math.inf,
        fit,
        h,
        grad,
        finite=finite,
        nonsmooth=constraint.nonsmooth,
        fit_grad=fit_grad if gradient else None,
        kink_slope=kink_slope,
    )


def l1_norm(w: ArrayLike) -> float:
    return float(np.abs(w).sum())


def composite_value(evaluation: ObjectiveEval, w: ArrayLike, lambda1: float) -> float:
    """L̃(W) + λ₁‖W‖₁."""
    return evaluation.total + lambda1 * l1_norm(w)


def stability_threshold(x: Dataset | ArrayLike) -> float:
    """‖∇fit(0)‖_∞ = max over i ≠ j of |(XᵀX/n)_ij|.

    The smallest λ₁ for which W = 0 is a stationary point of fit + λ₁‖W‖₁.
    """
    gram = gram_matrix(x)
    off_diagonal = np.abs(zero_diagonal(gram))
    return float(off_diagonal.max()) if off_diagonal.size else 0.0


def energy_radius(
    w0: ArrayLike,
    x: Dataset | ArrayLike,
    spec: ConstraintSpec,
    params: AlmParams,
    lambda1: float,
    subgradient: bool = False,
) -> float:
    """ℓ₁ radius F(W₀)/λ₁ containing every iterate of a monotone inner loop.

    F = L̃ + λ₁‖·‖₁ is non-increasing along accepted proximal steps and
    L̃ ≥ 0, so λ₁‖W_k‖₁ ≤ F(W₀). Returns inf for λ₁ = 0.
    """
    if lambda1 <= 0:
        return math.inf
    start = alm_eval(w0, x, spec, params, subgradient=subgradient, gradient=False)
    return composite_value(start, w0, lambda1) / lambda1
