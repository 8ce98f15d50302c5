import math
import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike

from sparsedag._compat import Self, StrEnum
from sparsedag.linalg import (
    Matrix,
    NonFiniteError,
    as_square,
    is_dag_support,
    mat_exp,
    support,
    zero_diagonal,
)

# Defaults for the constraint parameters
DEFAULT_ALPHA = 0.5
DEFAULT_EPSILON = 1e-8
DEFAULT_DELTA = 1e-7
DEFAULT_S = 1.0
PARAMETERS = ("alpha", "epsilon", "delta", "s")


class ConstraintKind(StrEnum):
    EXP = "Exp"
    LOGDET = "LogDet"
    AAC = "Aac"
    AHOC = "Ahoc"
    SAHOC = "SAhoc"
    SMOOTHED_AHOC = "SmoothedAhoc"


RELEVANT_PARAMETERS: dict[ConstraintKind, tuple[str, ...]] = {
    ConstraintKind.EXP: (),
    ConstraintKind.LOGDET: ("s",),
    ConstraintKind.AAC: ("epsilon",),
    ConstraintKind.AHOC: ("alpha", "epsilon"),
    ConstraintKind.SAHOC: ("alpha",),
    ConstraintKind.SMOOTHED_AHOC: ("alpha", "epsilon", "delta"),
}


@dataclass(frozen=True)
class ConstraintSpec:
    """An acyclicity constraint family and its parameters.

    Attributes:
        kind: Which constraint to evaluate.
        alpha: Hybrid factor of the HOC core, in [0, 1).
        epsilon: Normalization offset ε > 0 of Aac, Ahoc and SmoothedAhoc.
            SAhoc always normalizes with ε = 1.
        delta: Smoothing radius δ > 0 of SmoothedAhoc.
        s: Domain scale s ≥ 1 of LogDet.
    """

    kind: ConstraintKind
    alpha: float = DEFAULT_ALPHA
    epsilon: float = DEFAULT_EPSILON
    delta: float = DEFAULT_DELTA
    s: float = DEFAULT_S

    def __post_init__(self):
        object.__setattr__(self, "kind", ConstraintKind(self.kind))
        for name in PARAMETERS:
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"Constraint parameter {name} must be finite")
        if not 0 <= self.alpha < 1:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if self.s < 1:
            raise ValueError(f"s must be at least 1, got {self.s}")

    @property
    def smooth(self) -> bool:
        """Whether the constraint is differentiable everywhere."""
        return self.kind not in (ConstraintKind.AHOC, ConstraintKind.SAHOC)

    @property
    def relevant(self) -> tuple[str, ...]:
        return RELEVANT_PARAMETERS[self.kind]

    @property
    def ignored(self) -> tuple[str, ...]:
        """Irrelevant parameters that were set away from their defaults."""
        defaults = ConstraintSpec(self.kind)
        return tuple(
            name
            for name in PARAMETERS
            if name not in self.relevant
            and getattr(self, name) != getattr(defaults, name)
        )

    @property
    def param(self) -> str:
        """The relevant parameters as `name=value` pairs joined by ';'."""
        return ";".join(f"{name}={getattr(self, name)!r}" for name in self.relevant)

    @property
    def label(self) -> str:
        return f"{self.kind}({self.param})" if self.relevant else str(self.kind)

    def exact(self) -> Self:
        """The non-smoothed counterpart of this constraint."""
        if self.kind == ConstraintKind.SMOOTHED_AHOC:
            return replace(self, kind=ConstraintKind.AHOC)
        return self

    def build(self) -> "Constraint":
        match self.kind:
            case ConstraintKind.EXP:
                return ExpConstraint(self)
            case ConstraintKind.LOGDET:
                return LogDetConstraint(self)
            case ConstraintKind.AAC:
                return AacConstraint(self)
            case ConstraintKind.AHOC | ConstraintKind.SAHOC:
                return HocConstraint(self)
            case ConstraintKind.SMOOTHED_AHOC:
                return SmoothedHocConstraint(self)
        raise ValueError(f"Unknown constraint kind {self.kind}")


@dataclass
class ConstraintEval:
    """Value and gradient of a constraint at a point.

    Attributes:
        value: h(W), or +inf when the evaluation isn't finite.
        gradient: ∇_W h with zero diagonal. None if it wasn't requested;
            filled with NaN when the evaluation isn't finite.
        finite: Whether value and gradient are finite.
        nonsmooth: Whether W sits at a point where a non-smooth kind uses
            the sign(0) = 0 subgradient convention.
        kink: Slope in |W_ij| that the non-smoothed constraint has at
            W_ij = 0, for smoothed kinds only. The smoothed gradient is flat
            there, so this is what keeps an entry at zero.
    """

    value: float
    gradient: Optional[Matrix]
    finite: bool = True
    nonsmooth: bool = False
    kink: Optional[Matrix] = None


# --- Building blocks ---


def _check_alpha(alpha: float) -> None:
    if not 0 <= alpha < 1:
        raise ValueError(f"alpha must lie in [0, 1), got {alpha}")


def hoc_core(w: ArrayLike, alpha: float) -> Matrix:
    """Hybrid-order core α(W∘W) + (1−α)|W|."""
    _check_alpha(alpha)
    w = np.asarray(w, dtype=np.float64)
    return alpha * w * w + (1 - alpha) * np.abs(w)


def hoc_core_derivative(w: Matrix, alpha: float) -> Matrix:
    # np.sign(0) == 0
    return 2 * alpha * w + (1 - alpha) * np.sign(w)


def smooth_hoc_core(w: ArrayLike, alpha: float, delta: float) -> Matrix:
    """Smoothed core α(W∘W) + (1−α)√(W∘W + δ²).

    Every entry, including the diagonal, is at least (1−α)δ.
    """
    _check_alpha(alpha)
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    w = np.asarray(w, dtype=np.float64)
    return alpha * w * w + (1 - alpha) * np.hypot(w, delta)


def smooth_hoc_core_derivative(w: Matrix, alpha: float, delta: float) -> Matrix:
    return 2 * alpha * w + (1 - alpha) * w / np.hypot(w, delta)


def asn_normalize(m: ArrayLike, epsilon: float) -> Matrix:
    """Scale `m` into the open unit Frobenius ball: M / (‖M‖_F + ε)."""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    m = np.asarray(m, dtype=np.float64)
    return m / (np.linalg.norm(m, "fro") + epsilon)


def asn_adjoint(m: Matrix, epsilon: float, g: Matrix) -> Matrix:
    """Pull a gradient `g` taken at asn_normalize(m) back to `m`.

    G ↦ G/D − (⟨M, G⟩ / (D²‖M‖_F))·M with D = ‖M‖_F + ε. The second term is
    taken as zero when ‖M‖_F = 0.
    """
    norm = float(np.linalg.norm(m, "fro"))
    denom = norm + epsilon
    out = g / denom
    if norm > 0:
        out = out - (float(np.vdot(m, g)) / (denom * denom * norm)) * m
    return out


def _trace_exp(a: Matrix) -> tuple[float, Matrix]:
    """tr(expm(A)) − d and the transposed exponential (its gradient in A)."""
    e = mat_exp(a)
    return max(float(np.trace(e)) - a.shape[0], 0.0), e.T


# --- Constraint families ---


class Constraint(ABC):
    """Abstract base class of the acyclicity constraints."""

    spec: ConstraintSpec

    def __init__(self, spec: ConstraintSpec):
        self.spec = spec

    def evaluate(self, w: ArrayLike, gradient: bool = True) -> ConstraintEval:
        """Evaluate h(W) and, optionally, its gradient.

        Non-finite intermediate results are reported through the `finite`
        flag rather than raised.

        Raises:
            ValueError: If W isn't square or has a nonzero diagonal.
        """
        w = as_square(w, "W")
        if np.any(np.diag(w) != 0):
            raise ValueError("W must have a zero diagonal")
        try:
            with np.errstate(over="raise", invalid="raise", divide="raise"):
                result = self._evaluate(w, gradient)
        except (NonFiniteError, FloatingPointError, scipy.linalg.LinAlgError):
            return self._non_finite(w, gradient)
        if not math.isfinite(result.value) or (
            result.gradient is not None and not np.all(np.isfinite(result.gradient))
        ):
            return self._non_finite(w, gradient)
        return result

    @staticmethod
    def _non_finite(w: Matrix, gradient: bool) -> ConstraintEval:
        grad = np.full_like(w, np.nan) if gradient else None
        return ConstraintEval(math.inf, grad, finite=False)

    @abstractmethod
    def _evaluate(self, w: Matrix, gradient: bool) -> ConstraintEval:
        pass


class ExpConstraint(Constraint):
    """tr(expm(W∘W)) − d."""

    def _evaluate(self, w: Matrix, gradient: bool) -> ConstraintEval:
        value, e_t = _trace_exp(w * w)
        grad = zero_diagonal(2 * w * e_t) if gradient else None
        return ConstraintEval(value, grad)


class LogDetConstraint(Constraint):
    """−log det(sI − W∘W) + d·log s.

    Points where the determinant is not positive are outside the domain and
    evaluate as non-finite.
    """

    def _evaluate(self, w: Matrix, gradient: bool) -> ConstraintEval:
        d, s = w.shape[0], self.spec.s
        q = s * np.eye(d) - w * w
        sign, logdet = np.linalg.slogdet(q)
        if sign <= 0:
            return self._non_finite(w, gradient)
        value = float(-logdet + d * math.log(s))
        grad = zero_diagonal(2 * w * scipy.linalg.inv(q).T) if gradient else None
        return ConstraintEval(value, grad)


class NormalizedConstraint(Constraint):
    """h_exp applied to a normalized nonnegative core of W."""

    @property
    def epsilon(self) -> float:
        return self.spec.epsilon

    @abstractmethod
    def core(self, w: Matrix) -> Matrix:
        pass

    @abstractmethod
    def core_derivative(self, w: Matrix) -> Matrix:
        pass

    def nonsmooth_at(self, w: Matrix) -> bool:
        return False

    def kink(self, adjoint: Matrix) -> Optional[Matrix]:
        return None

    def _evaluate(self, w: Matrix, gradient: bool) -> ConstraintEval:
        m = self.core(w)
        value, e_t = _trace_exp(asn_normalize(m, self.epsilon))
        if not gradient:
            return ConstraintEval(value, None)
        adjoint = asn_adjoint(m, self.epsilon, e_t)
        return ConstraintEval(
            value,
            zero_diagonal(self.core_derivative(w) * adjoint),
            nonsmooth=self.nonsmooth_at(w),
            kink=self.kink(adjoint),
        )


class AacConstraint(NormalizedConstraint):
    def core(self, w: Matrix) -> Matrix:
        return w * w

    def core_derivative(self, w: Matrix) -> Matrix:
        return 2 * w


class HocConstraint(NormalizedConstraint):
    """Ahoc (normalized with ε) and SAhoc (normalized with ε = 1)."""

    @property
    def epsilon(self) -> float:
        return 1.0 if self.spec.kind == ConstraintKind.SAHOC else self.spec.epsilon

    def core(self, w: Matrix) -> Matrix:
        return hoc_core(w, self.spec.alpha)

    def core_derivative(self, w: Matrix) -> Matrix:
        return hoc_core_derivative(w, self.spec.alpha)

    def nonsmooth_at(self, w: Matrix) -> bool:
        return bool(np.any(~support(w) & ~np.eye(w.shape[0], dtype=bool)))


class SmoothedHocConstraint(NormalizedConstraint):
    def core(self, w: Matrix) -> Matrix:
        return smooth_hoc_core(w, self.spec.alpha, self.spec.delta)

    def core_derivative(self, w: Matrix) -> Matrix:
        return smooth_hoc_core_derivative(w, self.spec.alpha, self.spec.delta)

    def kink(self, adjoint: Matrix) -> Optional[Matrix]:
        # one-sided derivative of the unsmoothed core at 0 is 1 − α
        return zero_diagonal((1 - self.spec.alpha) * adjoint)


# --- Public operations ---


def constraint_value(spec: ConstraintSpec, w: ArrayLike) -> float:
    """h(W); +inf when the evaluation isn't finite."""
    return spec.build().evaluate(w, gradient=False).value


def constraint_grad(spec: ConstraintSpec, w: ArrayLike) -> ConstraintEval:
    return spec.build().evaluate(w, gradient=True)


def exact_constraint_value(spec: ConstraintSpec, w: ArrayLike) -> float:
    """The non-smoothed constraint value, exactly 0.0 on acyclic supports."""
    if is_dag_support(support(w)):
        return 0.0
    return constraint_value(spec.exact(), w)


def constraint_hessian(spec: ConstraintSpec, w: ArrayLike, step: float = 1e-6) -> Matrix:
    """Central-difference Hessian of h over the off-diagonal entries of W.

    Rows and columns follow the row-major order of the off-diagonal entries.
    Costs 2·d(d−1) gradient evaluations, so it is meant for small d.
    """
    w = as_square(w, "W")
    constraint = spec.build()
    coords = list(zip(*np.nonzero(~np.eye(w.shape[0], dtype=bool))))
    hessian = np.empty((len(coords), len(coords)))
    for col, (i, j) in enumerate(coords):
        plus, minus = w.copy(), w.copy()
        plus[i, j] += step
        minus[i, j] -= step
        g_plus = constraint.evaluate(plus).gradient
        g_minus = constraint.evaluate(minus).gradient
        diff = (g_plus - g_minus) / (2 * step)
        hessian[:, col] = [diff[a, b] for a, b in coords]
    return 0.5 * (hessian + hessian.T)


def hessian_condition(spec: ConstraintSpec, w: ArrayLike) -> float:
    """Condition number of `constraint_hessian`; inf if it isn't finite."""
    hessian = constraint_hessian(spec, w)
    if not np.all(np.isfinite(hessian)):
        return math.inf
    return float(np.linalg.cond(hessian))


def warn_ignored(spec: ConstraintSpec) -> None:
    if spec.ignored:
        warnings.warn(
            f"{spec.kind} ignores parameter(s) {', '.join(spec.ignored)}",
            RuntimeWarning,
        )
