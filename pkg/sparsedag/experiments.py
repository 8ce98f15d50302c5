"""Experiment protocols: gradient sweeps, benchmarks and stress tests.

Every protocol expands its configuration into work items (seed × grid point
× method) in a fixed order, runs them on a thread pool, and gathers the rows
by index, so the CSV bodies only depend on the configuration.
"""

import logging
import math
import time
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from typing import Any, Optional

import numpy as np
import pandas as pd

import sparsedag
from sparsedag.config import ExperimentConfig, ExperimentKind, MethodSpec
from sparsedag.constraints import (
    ConstraintKind,
    ConstraintSpec,
    constraint_grad,
    hessian_condition,
    warn_ignored,
)
from sparsedag.linalg import Matrix, nnz, support
from sparsedag.metrics import structural_score
from sparsedag.optim import TRACE_COLUMNS, AdamParams, OptimConfig, RunReport, adam_baseline, alm_outer
from sparsedag.report import (
    BENCHMARK_COLUMNS,
    GRADIENT_COLUMNS,
    TIMING_COLUMNS,
    ReportBundle,
    frame,
)
from sparsedag.sem import (
    Dataset,
    GraphSpec,
    Stream,
    generate_dataset,
    load_dataset_csv,
    near_cyclic_instance,
    sample_er_dag,
    simulate_sem,
    stream_rng,
)

logger = logging.getLogger(__name__)

HOC_FAMILY = (ConstraintKind.AHOC, ConstraintKind.SAHOC, ConstraintKind.SMOOTHED_AHOC)
HISTORY_COLUMNS = [
    "method",
    "seed",
    "outer",
    "mu",
    "rho",
    "h_smoothed",
    "h_exact",
    "nnz",
    "inner_iterations",
    "inner_status",
    "snapped",
]
TRAJECTORY_COLUMNS = ["seed", "lambda1", *TRACE_COLUMNS]
GROUP_COLUMNS = ["method", "d", "lambda1", "delta"]


@dataclass
class ItemResult:
    """What one work item produced.

    Attributes:
        rows: Rows of the experiment's main table.
        timings: Wall times of the optimization runs.
        tables: Additional tables by file stem.
        matrices: Fitted adjacencies by method.
        notes: Entries for the JSON summary.
        reports: Run reports, one per optimization row.
        errors: Failures caught while running the item.
    """

    rows: list[dict] = field(default_factory=list)
    timings: list[dict] = field(default_factory=list)
    tables: dict[str, list[pd.DataFrame]] = field(default_factory=dict)
    matrices: dict[str, Matrix] = field(default_factory=dict)
    notes: list[dict] = field(default_factory=list)
    reports: list[RunReport] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)


@dataclass
class WorkItem:
    key: dict[str, Any]
    run: Callable[[], ItemResult]


def _execute(item: WorkItem) -> ItemResult:
    try:
        result = item.run()
    except Exception as e:
        logger.exception("Work item %s failed", item.key)
        return ItemResult(
            rows=[item.key | {"status": "Error"}],
            errors=[item.key | {"error": f"{type(e).__name__}: {e}"}],
        )
    logger.info("Finished work item %s", item.key)
    return result


def run_items(items: list[WorkItem], workers: int = 1) -> list[ItemResult]:
    """Run work items on up to `workers` threads, results in item order."""
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(_execute, items))


# --- Gradient sweeps ---


def cycle_path(rho: float) -> Matrix:
    """The 3-cycle 0→1→2→0 with equal weights √ρ, so that ρ(W∘W) = ρ."""
    w = np.zeros((3, 3))
    w[0, 1] = w[1, 2] = w[2, 0] = math.sqrt(rho)
    return w


def magnitude_direction(graph: GraphSpec) -> Matrix:
    """A seeded direction with both orientations of every ER edge.

    The forward orientation carries the ER weight and the reverse one an
    independent weight from the same magnitude range, drawn from the
    direction stream of `graph.seed`.
    """
    w = sample_er_dag(graph)
    rng = stream_rng(graph.seed, Stream.DIRECTION)
    d = graph.d
    magnitudes = rng.uniform(graph.weight_low, graph.weight_high, size=(d, d))
    signs = rng.choice([-1.0, 1.0], size=(d, d))
    return w + support(w).T * magnitudes * signs


def gradient_row(spec: ConstraintSpec, point: float, w: Matrix) -> dict:
    evaluation = constraint_grad(spec, w)
    norm = float(np.linalg.norm(evaluation.gradient)) if evaluation.finite else math.inf
    return {
        "constraint": str(spec.kind),
        "param": spec.param,
        "t_or_rho": point,
        "grad_fro_norm": norm,
        "h_value": evaluation.value,
    }


def _rho_items(cfg: ExperimentConfig) -> list[WorkItem]:
    def sweep(spec: ConstraintSpec, rho: float) -> ItemResult:
        return ItemResult(rows=[gradient_row(spec, rho, cycle_path(rho))])

    return [
        WorkItem(
            {"constraint": str(spec.kind), "param": spec.param, "t_or_rho": rho},
            lambda spec=spec, rho=rho: sweep(spec, rho),
        )
        for spec in cfg.constraints
        for rho in cfg.sweep.rho_values
    ]


def synergy_bound(spec: ConstraintSpec, u: Matrix) -> float:
    """(1 − α)·√nnz(U)/D₀, with D₀ the normalization offset at the origin."""
    offset = 1.0 if spec.kind == ConstraintKind.SAHOC else spec.epsilon
    return (1 - spec.alpha) * math.sqrt(nnz(u)) / offset


def _magnitude_items(cfg: ExperimentConfig, specs: list[ConstraintSpec]) -> list[WorkItem]:
    def sweep(spec: ConstraintSpec, seed: int, t: float) -> ItemResult:
        u = magnitude_direction(replace(cfg.graph, seed=seed))
        result = ItemResult(rows=[gradient_row(spec, t, t * u) | {"seed": seed}])
        if cfg.experiment == ExperimentKind.L1_SYNERGY and t == cfg.sweep.t_values[0]:
            result.notes.append(
                {
                    "constraint": spec.label,
                    "seed": seed,
                    "bound": "gradient norm lower bound (1 - alpha) * sqrt(nnz) / offset",
                    "bound_value": synergy_bound(spec, u),
                }
            )
        return result

    return [
        WorkItem(
            {"constraint": str(spec.kind), "param": spec.param, "t_or_rho": t, "seed": seed},
            lambda spec=spec, seed=seed, t=t: sweep(spec, seed, t),
        )
        for seed in cfg.seeds
        for spec in specs
        for t in cfg.sweep.t_values
    ]


def synergy_constraints(cfg: ExperimentConfig) -> list[ConstraintSpec]:
    specs = [spec for spec in cfg.constraints if spec.kind in HOC_FAMILY]
    if not specs:
        specs = [
            ConstraintSpec(ConstraintKind.SMOOTHED_AHOC, delta=1e-8),
            ConstraintSpec(ConstraintKind.SAHOC),
        ]
    return specs


# --- Optimization experiments ---


def fit(method: MethodSpec, dataset: Dataset, optim: OptimConfig, adam: AdamParams) -> RunReport:
    """Run one method on one dataset."""
    cfg = replace(optim, subgradient=optim.subgradient or method.subgradient)
    match method.solver:
        case "spg":
            report = alm_outer(dataset, method.constraint, cfg)
        case "adam":
            report = adam_baseline(dataset, method.constraint, cfg, adam)
        case other:
            raise ValueError(f"Unknown solver {other!r}")
    report.method = method.name
    return report


def _delta_of(spec: ConstraintSpec) -> float:
    return spec.delta if spec.kind == ConstraintKind.SMOOTHED_AHOC else math.nan


def benchmark_row(dataset: Dataset, seed: int, report: RunReport, tau: float) -> dict:
    row = {
        "method": report.method,
        "d": dataset.d,
        "seed": seed,
        "lambda1": report.config.lambda1,
        "delta": _delta_of(report.spec),
        "final_h_exact": report.h_exact,
        "final_h_smoothed": report.h_smoothed,
        "status": str(report.status),
    }
    if dataset.w_true is not None:
        score = structural_score(report.w, dataset.w_true, tau)
        row |= {k: v for k, v in score.as_dict().items() if k in BENCHMARK_COLUMNS}
    else:
        count = nnz(report.w)
        off_diagonal = dataset.d * (dataset.d - 1)
        row |= {
            "shd": math.nan,
            "nnz": count,
            "exact_zero_count": off_diagonal - count,
            "sparsity": (off_diagonal - count) / off_diagonal if off_diagonal else 1.0,
            "tpr": math.nan,
            "fdr": math.nan,
        }
    return row


def _optimization_result(
    method: MethodSpec,
    dataset: Dataset,
    seed: int,
    optim: OptimConfig,
    cfg: ExperimentConfig,
) -> tuple[ItemResult, RunReport]:
    report = fit(method, dataset, optim, cfg.adam)
    report.seeds = {"graph": seed, "noise": seed}
    row = benchmark_row(dataset, seed, report, cfg.tau)
    timing = {k: row[k] for k in TIMING_COLUMNS if k in row}
    timing["wall_seconds"] = report.wall_seconds
    return ItemResult(rows=[row], timings=[timing], reports=[report]), report


def _benchmark_items(
    cfg: ExperimentConfig,
    datasets: dict[Any, Dataset],
    plan: list[tuple[Any, int, MethodSpec, OptimConfig]],
    extra: Optional[Callable[[ItemResult, RunReport, Dataset, int], None]] = None,
) -> list[WorkItem]:
    """Work items for (dataset key, seed, method, optimizer settings) tuples."""

    def run(key: Any, seed: int, method: MethodSpec, optim: OptimConfig) -> ItemResult:
        dataset = datasets[key]
        result, report = _optimization_result(method, dataset, seed, optim, cfg)
        if extra is not None:
            extra(result, report, dataset, seed)
        return result

    return [
        WorkItem(
            {
                "method": method.name,
                "d": datasets[key].d,
                "seed": seed,
                "lambda1": optim.lambda1,
                "delta": _delta_of(method.constraint),
            },
            lambda key=key, seed=seed, method=method, optim=optim: run(key, seed, method, optim),
        )
        for key, seed, method, optim in plan
    ]


def _synthetic(cfg: ExperimentConfig, graph: GraphSpec) -> Dataset:
    dataset = generate_dataset(graph, cfg.data.n, cfg.data.noise_std)
    _ = dataset.gram
    return dataset


def primary_method(cfg: ExperimentConfig) -> MethodSpec:
    """The first SPG method of the configuration, SmoothedAhoc if there is none."""
    for method in cfg.methods:
        if method.solver == "spg":
            return method
    return MethodSpec("spg-ahoc", "spg", ConstraintSpec(ConstraintKind.SMOOTHED_AHOC))


def _sparse_benchmark(cfg: ExperimentConfig) -> list[WorkItem]:
    datasets = {seed: _synthetic(cfg, replace(cfg.graph, seed=seed)) for seed in cfg.seeds}
    plan = [(seed, seed, method, cfg.optim) for seed in cfg.seeds for method in cfg.methods]
    return _benchmark_items(cfg, datasets, plan)


def _near_cyclic(cfg: ExperimentConfig) -> list[WorkItem]:
    datasets = {}
    for seed in cfg.seeds:
        datasets[seed] = simulate_sem(
            near_cyclic_instance(), cfg.data.n, cfg.data.noise_std, seed, near_cyclic=True
        )

    def history(result: ItemResult, report: RunReport, dataset: Dataset, seed: int) -> None:
        table = report.outer.copy()
        table.insert(0, "seed", seed)
        table.insert(0, "method", report.method)
        result.tables["history"] = [table.reindex(columns=HISTORY_COLUMNS)]

    plan = [(seed, seed, method, cfg.optim) for seed in cfg.seeds for method in cfg.methods]
    return _benchmark_items(cfg, datasets, plan, history)


def _delta_sensitivity(cfg: ExperimentConfig) -> list[WorkItem]:
    datasets = {seed: _synthetic(cfg, replace(cfg.graph, seed=seed)) for seed in cfg.seeds}
    base = primary_method(cfg)
    if base.constraint.kind != ConstraintKind.SMOOTHED_AHOC:
        base = replace(base, constraint=ConstraintSpec(ConstraintKind.SMOOTHED_AHOC))
    plan = [
        (seed, seed, replace(base, constraint=replace(base.constraint, delta=delta)), cfg.optim)
        for seed in cfg.seeds
        for delta in cfg.sweep.delta_values
    ]
    return _benchmark_items(cfg, datasets, plan)


def _lambda_trajectory(cfg: ExperimentConfig) -> list[WorkItem]:
    datasets = {seed: _synthetic(cfg, replace(cfg.graph, seed=seed)) for seed in cfg.seeds}
    method = primary_method(cfg)

    def trajectory(result: ItemResult, report: RunReport, dataset: Dataset, seed: int) -> None:
        table = report.trace.dataframe
        first_outer = table[table["outer"] == 0]
        table.insert(0, "lambda1", report.config.lambda1)
        table.insert(0, "seed", seed)
        result.tables["trajectory"] = [table.reindex(columns=TRAJECTORY_COLUMNS)]
        result.notes.append(
            {
                "seed": seed,
                "lambda1": report.config.lambda1,
                "first_outer_max_w_norm": float(first_outer["w_norm"].max())
                if len(first_outer)
                else 0.0,
                "status": str(report.status),
                "tpr": result.rows[0]["tpr"],
            }
        )

    plan = [
        (seed, seed, method, replace(cfg.optim, lambda1=lam))
        for seed in cfg.seeds
        for lam in cfg.sweep.lambda_values
    ]
    return _benchmark_items(cfg, datasets, plan, trajectory)


def _scalability(cfg: ExperimentConfig) -> list[WorkItem]:
    datasets = {
        (seed, d): _synthetic(cfg, replace(cfg.graph, d=d, num_edges=d, seed=seed))
        for seed in cfg.seeds
        for d in cfg.sweep.d_values
    }
    plan = [
        ((seed, d), seed, method, cfg.optim)
        for seed in cfg.seeds
        for d in cfg.sweep.d_values
        for method in cfg.methods
    ]
    return _benchmark_items(cfg, datasets, plan)


def _fit_csv(cfg: ExperimentConfig) -> list[WorkItem]:
    source = cfg.data
    dataset = load_dataset_csv(source.path, source.has_header, source.center, source.truth_path)
    _ = dataset.gram
    seed = cfg.seeds[0]

    def keep_matrix(result: ItemResult, report: RunReport, dataset: Dataset, seed: int) -> None:
        result.matrices[report.method] = report.w

    plan = [(None, seed, method, cfg.optim) for method in cfg.methods]
    return _benchmark_items(cfg, {None: dataset}, plan, keep_matrix)


# --- Assembly ---


def _aggregates(rows: pd.DataFrame, timings: pd.DataFrame) -> list[dict]:
    if rows.empty:
        return []
    keys = [c for c in TIMING_COLUMNS if c != "wall_seconds"]
    table = rows.drop(columns="wall_seconds", errors="ignore")
    if timings.empty:
        table["wall_seconds"] = math.nan
    else:
        # error rows have no timing
        table = table.merge(timings[TIMING_COLUMNS].drop_duplicates(keys), on=keys, how="left")
    table["converged"] = table["status"] == "Converged"
    numeric = ["shd", "nnz", "sparsity", "tpr", "fdr", "final_h_exact", "wall_seconds"]
    for column in numeric:
        table[column] = pd.to_numeric(table[column], errors="coerce")
    grouped = table.groupby(GROUP_COLUMNS, dropna=False, sort=False)
    out = grouped[numeric].median().add_prefix("median_")
    out["runs"] = grouped.size()
    out["converged"] = grouped["converged"].sum()
    return out.reset_index().to_dict("records")


def _gradient_aggregates(rows: pd.DataFrame) -> list[dict]:
    if rows.empty:
        return []
    grouped = rows.groupby(["constraint", "param"], sort=False)["grad_fro_norm"]
    out = pd.DataFrame({"min_grad_fro_norm": grouped.min(), "max_grad_fro_norm": grouped.max()})
    return out.reset_index().to_dict("records")


def _delta_agreement(rows: pd.DataFrame) -> dict[str, bool]:
    return {
        str(seed): bool(group["shd"].nunique(dropna=False) == 1)
        for seed, group in rows.groupby("seed", sort=False)
    }


def _near_cyclic_conditions(cfg: ExperimentConfig) -> dict[str, float]:
    truth = near_cyclic_instance()
    return {method.name: hessian_condition(method.constraint, truth) for method in cfg.methods}


def _plan(cfg: ExperimentConfig) -> list[WorkItem]:
    match cfg.experiment:
        case ExperimentKind.GRAD_VS_RHO:
            return _rho_items(cfg)
        case ExperimentKind.GRAD_VS_MAGNITUDE:
            return _magnitude_items(cfg, cfg.constraints)
        case ExperimentKind.L1_SYNERGY:
            return _magnitude_items(cfg, synergy_constraints(cfg))
        case ExperimentKind.SPARSE_BENCHMARK:
            return _sparse_benchmark(cfg)
        case ExperimentKind.NEAR_CYCLIC:
            return _near_cyclic(cfg)
        case ExperimentKind.DELTA_SENSITIVITY:
            return _delta_sensitivity(cfg)
        case ExperimentKind.LAMBDA_TRAJECTORY:
            return _lambda_trajectory(cfg)
        case ExperimentKind.SCALABILITY:
            return _scalability(cfg)
        case ExperimentKind.FIT_CSV:
            return _fit_csv(cfg)
    raise ValueError(f"Unknown experiment {cfg.experiment}")


def _used_constraints(cfg: ExperimentConfig) -> list[ConstraintSpec]:
    if cfg.experiment == ExperimentKind.L1_SYNERGY:
        return synergy_constraints(cfg)
    if cfg.experiment.is_gradient_sweep:
        return list(cfg.constraints)
    return [method.constraint for method in cfg.methods]


def run_experiment(cfg: ExperimentConfig, workers: Optional[int] = None) -> ReportBundle:
    """Execute the configured protocol for every seed and grid point.

    Failures of single work items are logged and recorded as rows with
    status `Error`; the remaining items still run.

    Args:
        cfg: Validated configuration.
        workers: Worker count overriding the configuration and environment.

    Returns:
        The tables, summary and manifest; nothing is written to disk.
    """
    workers = cfg.resolve_workers(workers)
    started = datetime.now(timezone.utc)
    clock = time.perf_counter()
    used = _used_constraints(cfg)
    for spec in used:
        warn_ignored(spec)

    items = _plan(cfg)
    logger.info("Running %s: %d work items on %d worker(s)", cfg.experiment, len(items), workers)
    results = run_items(items, workers)

    rows = [row for result in results for row in result.rows]
    bundle = ReportBundle(str(cfg.experiment))
    summary: dict[str, Any] = {"experiment": str(cfg.experiment)}
    if cfg.experiment.is_gradient_sweep:
        columns = GRADIENT_COLUMNS + ([] if cfg.experiment == ExperimentKind.GRAD_VS_RHO else ["seed"])
        table = frame(rows, columns)
        bundle.tables["gradients"] = table
        summary["aggregates"] = _gradient_aggregates(table)
    else:
        table = frame(rows, BENCHMARK_COLUMNS)
        timings = frame([t for result in results for t in result.timings], TIMING_COLUMNS)
        bundle.tables["benchmark"] = table
        for stem in ("history", "trajectory"):
            parts = [part for result in results for part in result.tables.get(stem, [])]
            if parts:
                bundle.tables[stem] = pd.concat(parts, ignore_index=True)
        bundle.tables["timings"] = timings
        bundle.reports = [report for result in results for report in result.reports]
        for result in results:
            bundle.matrices |= result.matrices
        summary["aggregates"] = _aggregates(table, timings)
        summary["wall_seconds"] = timings["wall_seconds"].tolist()
        if cfg.experiment == ExperimentKind.DELTA_SENSITIVITY:
            summary["shd_identical_across_delta"] = _delta_agreement(table)
        if cfg.experiment == ExperimentKind.NEAR_CYCLIC:
            summary["hessian_condition_at_truth"] = _near_cyclic_conditions(cfg)

    summary["rows"] = table.to_dict("records")
    notes = [note for result in results for note in result.notes]
    if notes:
        summary["notes"] = notes
    errors = [error for result in results for error in result.errors]
    if errors:
        summary["errors"] = errors
    bundle.summary = summary

    bundle.manifest = {
        "tool": "sparsedag",
        "version": sparsedag.__version__,
        "experiment": str(cfg.experiment),
        "config": cfg.raw,
        "source": None if cfg.source is None else str(cfg.source),
        "seeds": cfg.seeds,
        "workers": workers,
        "ignored_parameters": {spec.label: list(spec.ignored) for spec in used if spec.ignored},
        "optim": asdict(cfg.optim),
        "started": started.isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
        "wall_seconds": time.perf_counter() - clock,
        "work_items": len(items),
        "error_rows": len(errors),
    }
    logger.info(
        "%s done: %d rows, %d errors in %.2fs",
        cfg.experiment,
        len(table),
        len(errors),
        bundle.manifest["wall_seconds"],
    )
    return bundle
