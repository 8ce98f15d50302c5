import logging
import math
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from sparsedag._compat import StrEnum
from typing import Optional

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike

from sparsedag.constraints import ConstraintKind, ConstraintSpec, constraint_value, exact_constraint_value
from sparsedag.linalg import BoolMatrix, Matrix, as_square, is_dag_support, support, zero_diagonal
from sparsedag.objective import (
    AlmParams,
    ObjectiveEval,
    alm_eval,
    composite_value,
    energy_radius,
    l1_norm,
)
from sparsedag.sem import Dataset

logger = logging.getLogger(__name__)

# Relative slack of the sufficient-decrease test, absorbing rounding in L̃
DECREASE_SLACK = 1e-12


class Status(StrEnum):
    CONVERGED = "Converged"
    LS_FAIL = "LsFail"
    NON_FINITE = "NonFinite"
    MAX_ITER = "MaxIter"
    STALLED = "Stalled"

    @property
    def failed(self) -> bool:
        return self in (Status.LS_FAIL, Status.NON_FINITE)


@dataclass(frozen=True)
class OptimConfig:
    """Parameters of the SPG inner loop and the ALM outer loop.

    Attributes:
        lambda1: ℓ₁ weight.
        eta_init: Initial and largest step size.
        ls_shrink: Backtracking factor in (0, 1).
        ls_max: Backtracking steps before giving up.
        inner_tol: Gradient-mapping norm that ends an inner loop.
        inner_ftol: Relative decrease of the composite objective per step
            below which an inner loop has stalled.
        inner_max: Inner iterations per outer iteration.
        mu0: Initial multiplier.
        rho0: Initial penalty.
        rho_growth: Penalty growth factor when h stalls.
        h_progress: Required reduction factor of h per outer iteration.
        h_tol: Non-smoothed h below which a run has converged.
        outer_max: Outer iterations.
        rho_max: Cap on the penalty.
        snap_radius: Multiple of δ within which SmoothedAhoc entries that the
            constraint kink holds at zero are set to zero after each inner
            loop.
        subgradient: Allow non-smooth constraint kinds.
    """

    lambda1: float = 0.1
    eta_init: float = 1.0
    ls_shrink: float = 0.5
    ls_max: int = 60
    inner_tol: float = 1e-6
    inner_ftol: float = 1e-12
    inner_max: int = 5000
    mu0: float = 0.0
    rho0: float = 1.0
    rho_growth: float = 10.0
    h_progress: float = 0.25
    h_tol: float = 1e-8
    outer_max: int = 100
    rho_max: float = 1e16
    snap_radius: float = 10.0
    subgradient: bool = False

    def __post_init__(self):
        checks = [
            (self.lambda1 >= 0, "lambda1 must be nonnegative"),
            (self.eta_init > 0, "eta_init must be positive"),
            (0 < self.ls_shrink < 1, "ls_shrink must lie in (0, 1)"),
            (self.ls_max >= 1, "ls_max must be positive"),
            (self.inner_tol > 0, "inner_tol must be positive"),
            (self.inner_ftol >= 0, "inner_ftol must be nonnegative"),
            (self.inner_max >= 1, "inner_max must be positive"),
            (self.mu0 >= 0, "mu0 must be nonnegative"),
            (self.rho0 > 0, "rho0 must be positive"),
            (self.rho_growth > 1, "rho_growth must exceed 1"),
            (0 < self.h_progress < 1, "h_progress must lie in (0, 1)"),
            (self.h_tol >= 0, "h_tol must be nonnegative"),
            (self.outer_max >= 1, "outer_max must be positive"),
            (self.rho_max >= self.rho0, "rho_max must be at least rho0"),
            (self.snap_radius >= 0, "snap_radius must be nonnegative"),
        ]
        for ok, message in checks:
            if not ok:
                raise ValueError(message)


@dataclass(frozen=True)
class AdamParams:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 5000
    record_every: int = 50

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0:
            raise ValueError("Adam lr and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.steps < 1 or self.record_every < 1:
            raise ValueError("Adam steps and record_every must be positive")


TRACE_COLUMNS = (
    "outer",
    "inner",
    "objective",
    "fit",
    "h",
    "w_norm",
    "w_l1",
    "nnz",
    "eta",
    "grad_map_norm",
    "support_changed",
)


class IterTrace:
    """Per-iteration history of an optimization run.

    Attributes:
        history: Dictionary mapping column names to their value history.
    """

    history: dict[str, list]

    def __init__(self, w0: Optional[ArrayLike] = None):
        self.history = {column: [] for column in TRACE_COLUMNS}
        self._signs = None if w0 is None else np.sign(np.asarray(w0))

    def __len__(self) -> int:
        return len(self.history["outer"])

    def record(
        self,
        outer: int,
        inner: int,
        w: Matrix,
        evaluation: ObjectiveEval,
        objective: float,
        eta: float,
        grad_map_norm: float,
    ) -> None:
        signs = np.sign(w)
        changed = self._signs is None or not np.array_equal(signs, self._signs)
        self._signs = signs
        row = {
            "outer": outer,
            "inner": inner,
            "objective": objective,
            "fit": evaluation.fit,
            "h": evaluation.h,
            "w_norm": float(np.linalg.norm(w, "fro")),
            "w_l1": l1_norm(w),
            "nnz": int(support(w).sum()),
            "eta": eta,
            "grad_map_norm": grad_map_norm,
            "support_changed": changed,
        }
        for column, value in row.items():
            self.history[column].append(value)

    @property
    def dataframe(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=list(TRACE_COLUMNS))

    @property
    def identification_index(self) -> int:
        """Number of recorded iterations after which the signed support never changes."""
        changes = [k for k, c in enumerate(self.history["support_changed"]) if c]
        return changes[-1] + 1 if changes else 0

    @property
    def max_w_norm(self) -> float:
        return max(self.history["w_norm"], default=0.0)

    def monotone(self, rel_tol: float = 1e-10) -> bool:
        """Whether the composite objective never rises within an outer iteration."""
        outer, objective = self.history["outer"], self.history["objective"]
        for k in range(1, len(self)):
            if outer[k] != outer[k - 1]:
                continue
            if objective[k] > objective[k - 1] + rel_tol * max(1.0, abs(objective[k - 1])):
                return False
        return True


@dataclass
class RunReport:
    """Outcome of an optimization run.

    Attributes:
        w: Final weighted adjacency.
        h_smoothed: Constraint value of `w` under the run's constraint.
        h_exact: Non-smoothed constraint value, exactly 0.0 on acyclic supports.
        h_exact_zero: Whether `h_exact` is zero because the support is acyclic
            (rather than merely below `h_tol`).
        status: How the run ended.
        trace: Inner-iteration history.
        outer: Outer-iteration history (μ, ρ, h, nnz per ALM iteration).
        wall_seconds: Run time.
        config: Optimizer settings used.
        spec: Constraint used.
        method: Solver label.
        within_energy_radius: Whether every inner loop stayed inside the ℓ₁
            radius F(W₀)/λ₁ of its start.
        seeds: Seeds of the data the run was fitted to, filled in by callers.
    """

    w: Matrix
    h_smoothed: float
    h_exact: float
    h_exact_zero: bool
    status: Status
    trace: IterTrace
    outer: pd.DataFrame
    wall_seconds: float
    config: OptimConfig
    spec: ConstraintSpec
    method: str
    within_energy_radius: bool = True
    seeds: dict[str, int] = field(default_factory=dict)

    @property
    def nnz(self) -> int:
        return int(support(self.w).sum())

    @property
    def is_dag(self) -> bool:
        return is_dag_support(support(self.w))


# --- Proximal machinery ---


def prox_l1(v: ArrayLike, t: float) -> Matrix:
    """Soft thresholding sign(v)·max(|v| − t, 0) with a zero diagonal.

    Entries in the band [−t, t] become exactly +0.0.
    """
    if t < 0:
        raise ValueError(f"Threshold must be nonnegative, got {t}")
    v = np.asarray(v, dtype=np.float64)
    out = np.where(np.abs(v) > t, v - t * np.sign(v), 0.0)
    return zero_diagonal(out)


def gradient_mapping(w: Matrix, grad: Matrix, eta: float, lambda1: float) -> Matrix:
    """(W − prox(W − η∇, λ₁η))/η."""
    return (w - prox_l1(w - eta * grad, lambda1 * eta)) / eta


def threshold_support(w: ArrayLike, tau: float) -> BoolMatrix:
    """Entries with |w| > tau, diagonal excluded."""
    if tau < 0:
        raise ValueError(f"tau must be nonnegative, got {tau}")
    out = np.abs(np.asarray(w)) > tau
    np.fill_diagonal(out, False)
    return out


def zero_hold(
    w: Matrix, evaluation: ObjectiveEval, lambda1: float, radius: float = 0.0
) -> BoolMatrix:
    """Entries within `radius` of zero that the constraint kink keeps at zero.

    Zero is optimal for W_ij under the non-smoothed constraint when
    |∂fit/∂W_ij| ≤ λ₁ + (μ + ρh)·kink_ij. The smoothed constraint is flat at
    zero and can't hold such an entry, so the SPG step holds it instead.
    Empty for kinds without a kink, and off the diagonal.
    """
    held = np.zeros(w.shape, dtype=bool)
    if evaluation.kink_slope is None or evaluation.fit_grad is None:
        return held
    held = (np.abs(w) <= radius) & (
        np.abs(evaluation.fit_grad) <= lambda1 + evaluation.kink_slope
    )
    np.fill_diagonal(held, False)
    return held


@dataclass
class SpgStep:
    """Result of one backtracking proximal step.

    Attributes:
        w: Accepted candidate, or the input point on failure.
        eta: Accepted step size (last tried on failure).
        evaluations: Objective evaluations spent in the line search.
        status: None on success, LS_FAIL or NON_FINITE otherwise.
        evaluation: L̃ at `w`, without gradient.
        grad_map_norm: Norm of the gradient mapping at the input point with
            the accepted step size.
    """

    w: Matrix
    eta: float
    evaluations: int
    status: Optional[Status]
    evaluation: ObjectiveEval
    grad_map_norm: float


def spg_step(
    w: ArrayLike,
    x: Dataset | ArrayLike,
    spec: ConstraintSpec,
    alm: AlmParams,
    cfg: OptimConfig,
    eta_start: float,
    current: Optional[ObjectiveEval] = None,
    held: Optional[BoolMatrix] = None,
) -> SpgStep:
    """One smoothed proximal gradient step with backtracking.

    Shrinks η until the candidate prox(W − η∇L̃, λ₁η) satisfies
    L̃(W_c) ≤ L̃(W) + ⟨∇L̃, W_c − W⟩ + ‖W_c − W‖²/(2η). Candidates whose
    objective isn't finite are rejected like any other. Entries in `held`
    (exact zeros, see `zero_hold`) stay zero.

    Args:
        w: Current point.
        x: Samples.
        spec: Constraint.
        alm: Current μ and ρ.
        cfg: Optimizer settings.
        eta_start: First step size tried.
        current: L̃ and its gradient at `w`, if already known.
        held: Zero entries to keep at zero.
    """
    if eta_start <= 0:
        raise ValueError(f"eta_start must be positive, got {eta_start}")
    w = as_square(w, "W")
    if current is None or current.grad is None:
        current = alm_eval(w, x, spec, alm, subgradient=cfg.subgradient)
    if not current.finite:
        return SpgStep(w, eta_start, 0, Status.NON_FINITE, current, math.nan)

    slack = DECREASE_SLACK * max(1.0, abs(current.total))
    eta = eta_start
    any_finite = False
    trial = current
    for evaluations in range(1, cfg.ls_max + 1):
        candidate = prox_l1(w - eta * current.grad, cfg.lambda1 * eta)
        if held is not None:
            candidate[held] = 0.0
        trial = alm_eval(
            candidate, x, spec, alm, subgradient=cfg.subgradient, gradient=False
        )
        if trial.finite:
            any_finite = True
            diff = candidate - w
            model = (
                current.total
                + float(np.vdot(current.grad, diff))
                + float(np.vdot(diff, diff)) / (2 * eta)
            )
            if trial.total <= model + slack:
                grad_map_norm = float(np.linalg.norm(diff)) / eta
                return SpgStep(candidate, eta, evaluations, None, trial, grad_map_norm)
        eta *= cfg.ls_shrink

    status = Status.LS_FAIL if any_finite else Status.NON_FINITE
    logger.debug("Line search gave up after %d evaluations (%s)", cfg.ls_max, status)
    return SpgStep(w, eta, cfg.ls_max, status, current, math.nan)


@dataclass
class InnerResult:
    """Outcome of one inner loop.

    Attributes:
        budgeted: The solver runs a fixed number of steps, so MAX_ITER means
            it finished rather than ran out.
    """

    w: Matrix
    trace: IterTrace
    status: Status
    iterations: int
    budgeted: bool = False

    @property
    def complete(self) -> bool:
        """Whether the loop solved its subproblem as far as it can."""
        if self.status == Status.MAX_ITER:
            return self.budgeted
        return self.status in (Status.CONVERGED, Status.STALLED)


def spg_inner(
    w0: ArrayLike,
    x: Dataset | ArrayLike,
    spec: ConstraintSpec,
    alm: AlmParams,
    cfg: OptimConfig,
    trace: Optional[IterTrace] = None,
    outer: int = 0,
) -> InnerResult:
    """Iterate `spg_step` until the gradient mapping norm drops to `inner_tol`.

    The step size restarts each iteration at twice the last accepted one,
    capped at `eta_init`. Zero entries the constraint kink holds are kept at
    zero (`zero_hold`). A step that lowers the composite objective by no
    more than `inner_ftol` relative ends the loop as STALLED.

    Returns:
        The last accepted point with status CONVERGED, STALLED, MAX_ITER, or
        the failure status of the step that failed.
    """
    w = as_square(w0, "W0")
    trace = IterTrace(w) if trace is None else trace
    current = alm_eval(w, x, spec, alm, subgradient=cfg.subgradient)
    if not current.finite:
        return InnerResult(w, trace, Status.NON_FINITE, 0)

    eta = cfg.eta_init
    objective = composite_value(current, w, cfg.lambda1)
    for k in range(cfg.inner_max):
        held = zero_hold(w, current, cfg.lambda1)
        step = spg_step(w, x, spec, alm, cfg, eta, current, held)
        if step.status is not None:
            return InnerResult(w, trace, step.status, k)
        w, eta, previous = step.w, step.eta, objective
        objective = composite_value(step.evaluation, w, cfg.lambda1)
        trace.record(outer, k, w, step.evaluation, objective, eta, step.grad_map_norm)
        if step.grad_map_norm <= cfg.inner_tol:
            return InnerResult(w, trace, Status.CONVERGED, k + 1)
        if previous - objective <= cfg.inner_ftol * max(1.0, abs(objective)):
            logger.debug("Inner loop stalled at iteration %d with eta=%.3g", k, eta)
            return InnerResult(w, trace, Status.STALLED, k + 1)
        current = alm_eval(w, x, spec, alm, subgradient=cfg.subgradient)
        if not current.finite:
            return InnerResult(w, trace, Status.NON_FINITE, k + 1)
        eta = min(2 * eta, cfg.eta_init)
    return InnerResult(w, trace, Status.MAX_ITER, cfg.inner_max)


def _adam_inner(
    w0: Matrix,
    x: Dataset | ArrayLike,
    spec: ConstraintSpec,
    alm: AlmParams,
    cfg: OptimConfig,
    adam: AdamParams,
    trace: IterTrace,
    outer: int,
) -> InnerResult:
    w = w0.copy()
    m, v = np.zeros_like(w), np.zeros_like(w)
    for t in range(1, adam.steps + 1):
        evaluation = alm_eval(w, x, spec, alm, subgradient=cfg.subgradient)
        if not evaluation.finite:
            return InnerResult(w, trace, Status.NON_FINITE, t - 1)
        g = evaluation.grad + cfg.lambda1 * zero_diagonal(np.sign(w))
        m = adam.beta1 * m + (1 - adam.beta1) * g
        v = adam.beta2 * v + (1 - adam.beta2) * g * g
        m_hat = m / (1 - adam.beta1**t)
        v_hat = v / (1 - adam.beta2**t)
        w = zero_diagonal(w - adam.lr * m_hat / (np.sqrt(v_hat) + adam.eps))
        if not np.all(np.isfinite(w)):
            return InnerResult(w0, trace, Status.NON_FINITE, t)
        if t % adam.record_every == 0 or t == adam.steps:
            after = alm_eval(w, x, spec, alm, subgradient=cfg.subgradient, gradient=False)
            objective = composite_value(after, w, cfg.lambda1)
            trace.record(outer, t, w, after, objective, adam.lr, float(np.linalg.norm(g)))
    return InnerResult(w, trace, Status.MAX_ITER, adam.steps, budgeted=True)


InnerLoop = Callable[[Matrix, AlmParams, IterTrace, int], InnerResult]


def _converged(spec: ConstraintSpec, w: Matrix, h_exact: float, h_tol: float) -> bool:
    if spec.kind == ConstraintKind.SMOOTHED_AHOC:
        return is_dag_support(support(w))
    return h_exact <= h_tol


def snap_to_zero(
    w: Matrix,
    x: Dataset | ArrayLike,
    spec: ConstraintSpec,
    alm: AlmParams,
    cfg: OptimConfig,
) -> tuple[Matrix, int]:
    """Zero the entries within `snap_radius`·δ that `zero_hold` holds.

    A smoothed stationary point leaves such entries at a few δ rather than
    at zero. Only SmoothedAhoc has a kink, so other kinds pass through.

    Returns:
        The snapped matrix and the number of entries set to zero.
    """
    if spec.kind != ConstraintKind.SMOOTHED_AHOC or cfg.snap_radius == 0:
        return w, 0
    evaluation = alm_eval(w, x, spec, alm, subgradient=cfg.subgradient)
    mask = zero_hold(w, evaluation, cfg.lambda1, cfg.snap_radius * spec.delta) & (w != 0)
    count = int(mask.sum())
    if count:
        w = w.copy()
        w[mask] = 0.0
    return w, count


def _run_alm(
    x: Dataset | ArrayLike,
    spec: ConstraintSpec,
    cfg: OptimConfig,
    w_init: Optional[ArrayLike],
    inner: InnerLoop,
    method: str,
) -> RunReport:
    started = time.perf_counter()
    d = x.d if isinstance(x, Dataset) else np.asarray(x).shape[1]
    w = np.zeros((d, d)) if w_init is None else as_square(w_init, "W_init")
    if np.any(np.diag(w) != 0):
        raise ValueError("W_init must have a zero diagonal")

    mu, rho = cfg.mu0, cfg.rho0
    h_prev = math.inf
    trace = IterTrace(w)
    history: list[dict] = []
    status = Status.MAX_ITER
    bounded = True
    h_smoothed = constraint_value(spec, w)
    h_exact = exact_constraint_value(spec, w)

    for outer in range(cfg.outer_max):
        alm = AlmParams(mu, rho)
        first_row = len(trace)
        radius = energy_radius(w, x, spec, alm, cfg.lambda1, cfg.subgradient)
        result = inner(w, alm, trace, outer)
        w = result.w
        l1_norms = trace.history["w_l1"][first_row:]
        if l1_norms and max(l1_norms) > radius * (1 + 1e-9):
            bounded = False
        snapped = 0
        if not result.status.failed:
            w, snapped = snap_to_zero(w, x, spec, alm, cfg)

        h_smoothed = constraint_value(spec, w)
        h_exact = exact_constraint_value(spec, w)
        history.append(
            {
                "outer": outer,
                "mu": mu,
                "rho": rho,
                "h_smoothed": h_smoothed,
                "h_exact": h_exact,
                "nnz": int(support(w).sum()),
                "inner_iterations": result.iterations,
                "inner_status": str(result.status),
                "snapped": snapped,
            }
        )
        logger.debug(
            "%s outer %d: mu=%.3g rho=%.3g h=%.3g h_exact=%.3g nnz=%d inner=%d (%s) snapped=%d",
            method,
            outer,
            mu,
            rho,
            h_smoothed,
            h_exact,
            history[-1]["nnz"],
            result.iterations,
            result.status,
            snapped,
        )
        if result.status.failed:
            status = result.status
            break
        if not math.isfinite(h_smoothed):
            status = Status.NON_FINITE
            break
        # an unfinished subproblem is continued with the same μ and ρ
        if not result.complete:
            continue
        if _converged(spec, w, h_exact, cfg.h_tol):
            status = Status.CONVERGED
            break
        mu += rho * h_smoothed
        if h_smoothed > cfg.h_progress * h_prev:
            rho = min(rho * cfg.rho_growth, cfg.rho_max)
        h_prev = h_smoothed

    wall = time.perf_counter() - started
    logger.info(
        "%s finished with %s after %d outer iterations in %.2fs",
        method,
        status,
        len(history),
        wall,
    )
    return RunReport(
        w=w,
        h_smoothed=h_smoothed,
        h_exact=h_exact,
        h_exact_zero=h_exact == 0.0 and is_dag_support(support(w)),
        status=status,
        trace=trace,
        outer=pd.DataFrame(history),
        wall_seconds=wall,
        config=cfg,
        spec=spec,
        method=method,
        within_energy_radius=bounded,
    )


def alm_outer(
    x: Dataset | ArrayLike,
    spec: ConstraintSpec,
    cfg: OptimConfig,
    w_init: Optional[ArrayLike] = None,
) -> RunReport:
    """Augmented Lagrangian outer loop around `spg_inner`.

    After each inner loop that converged or stalled, μ ← μ + ρh̃ and ρ grows
    by `rho_growth` unless h̃ fell below `h_progress` times its previous
    value. An inner loop that ran out of iterations is resumed with the same
    μ and ρ. The run converges when the non-smoothed h is at most `h_tol`.
    SmoothedAhoc never reaches zero, so its runs converge once the support
    is acyclic, after `snap_to_zero` has cleared the entries left at a few δ.
    """

    def inner(w: Matrix, alm: AlmParams, trace: IterTrace, outer: int) -> InnerResult:
        return spg_inner(w, x, spec, alm, cfg, trace, outer)

    return _run_alm(x, spec, cfg, w_init, inner, "spg")


def adam_baseline(
    x: Dataset | ArrayLike,
    spec: ConstraintSpec,
    cfg: OptimConfig,
    adam: AdamParams = AdamParams(),
    w_init: Optional[ArrayLike] = None,
) -> RunReport:
    """The same outer loop with Adam on L̃ + λ₁‖W‖₁ as the inner solver.

    The ℓ₁ term enters through its sign(W) subgradient, so the output is
    generically dense.
    """

    def inner(w: Matrix, alm: AlmParams, trace: IterTrace, outer: int) -> InnerResult:
        return _adam_inner(w, x, spec, alm, cfg, adam, trace, outer)

    return _run_alm(x, spec, cfg, w_init, inner, "adam")
