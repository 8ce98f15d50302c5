import pytest
import json
import math
import numpy as np

from sparsedag.config import ExperimentConfig
from sparsedag.constraints import ConstraintKind, ConstraintSpec
from sparsedag.experiments import (
    cycle_path,
    magnitude_direction,
    run_experiment,
    synergy_bound,
)
from sparsedag.linalg import is_dag_support, spectral_radius, support
from sparsedag.report import BENCHMARK_COLUMNS, GRADIENT_COLUMNS, write_bundle
from sparsedag.sem import GraphSpec, generate_dataset, save_dataset

HEADER = "schema_version = 1\n"
QUICK = """
graph { d = 5  num_edges = 5 }
data { n = 100 }
optim { inner_max = 100  outer_max = 3 }
adam { steps = 60  record_every = 20 }
methods = [
  { name = "spg"  constraint { kind = SmoothedAhoc  delta = 1e-6 } },
  { name = "adam"  solver = adam  constraint { kind = Exp } },
]
"""


def config(text: str, *overrides: str) -> ExperimentConfig:
    return ExperimentConfig.from_text(HEADER + text, overrides)


# Building blocks


@pytest.mark.parametrize("rho", [0.5, 0.9999])
def test_cycle_path(rho):
    assert spectral_radius(cycle_path(rho) ** 2).value == pytest.approx(rho, rel=1e-9)


def test_magnitude_direction_has_both_orientations():
    graph = GraphSpec(8, 10, seed=2)
    u = magnitude_direction(graph)
    forward = support(generate_dataset(graph, 2).w_true)
    assert np.array_equal(support(u), forward | forward.T)
    assert not is_dag_support(support(u))
    assert np.all(np.abs(u[support(u)]) >= graph.weight_low)
    assert np.array_equal(u, magnitude_direction(graph))


def test_synergy_bound():
    u = np.array([[0.0, 1.0], [1.0, 0.0]])
    spec = ConstraintSpec(ConstraintKind.SMOOTHED_AHOC, alpha=0.5, epsilon=1e-8)
    assert synergy_bound(spec, u) == pytest.approx(0.5 * math.sqrt(2) / 1e-8)
    assert synergy_bound(ConstraintSpec(ConstraintKind.SAHOC), u) == pytest.approx(
        0.5 * math.sqrt(2)
    )


# Gradient sweeps


RHO_SWEEP = """
experiment = GradVsRho
seeds = [0]
constraints = [{ kind = Exp }, { kind = LogDet }, { kind = SmoothedAhoc  delta = 1e-8 }]
"""


def test_rho_sweep_rows():
    bundle = run_experiment(config(RHO_SWEEP))
    table = bundle.tables["gradients"]
    assert list(table.columns) == GRADIENT_COLUMNS
    assert len(table) == 60
    assert set(table["constraint"]) == {"Exp", "LogDet", "SmoothedAhoc"}
    logdet = table[table["constraint"] == "LogDet"].sort_values("t_or_rho")
    assert logdet["grad_fro_norm"].iloc[-1] > 1e3
    assert bundle.error_rows == 0
    assert len(bundle.summary["aggregates"]) == 3


def test_rho_sweep_ignores_grid_order():
    forward = run_experiment(config(RHO_SWEEP, "sweep.rho_values=[0.5, 0.9, 0.99]"))
    backward = run_experiment(config(RHO_SWEEP, "sweep.rho_values=[0.99, 0.5, 0.9]"))
    key = ["constraint", "t_or_rho"]
    a = forward.tables["gradients"].sort_values(key).reset_index(drop=True)
    b = backward.tables["gradients"].sort_values(key).reset_index(drop=True)
    assert a.equals(b)


def test_magnitude_sweep():
    cfg = config(
        "experiment = GradVsMagnitude\nseeds = [0, 1]\ngraph { d = 6 }\n"
        "sweep.t_values = [1e-4, 1e-2, 1]\n"
        "constraints = [{ kind = Exp }, { kind = SmoothedAhoc  delta = 1e-8 }]"
    )
    table = run_experiment(cfg).tables["gradients"]
    assert list(table.columns) == GRADIENT_COLUMNS + ["seed"]
    assert len(table) == 2 * 2 * 3
    exp = table[(table["constraint"] == "Exp") & (table["seed"] == 0)]
    assert exp["grad_fro_norm"].is_monotonic_increasing


def test_synergy_notes():
    cfg = config(
        "experiment = L1Synergy\nseeds = [0]\ngraph { d = 6 }\nsweep.t_values = [1e-3, 1e-1]\n"
        "constraints = [{ kind = Exp }, { kind = SmoothedAhoc  delta = 1e-8 }, { kind = SAhoc }]"
    )
    bundle = run_experiment(cfg)
    assert set(bundle.tables["gradients"]["constraint"]) == {"SmoothedAhoc", "SAhoc"}
    assert len(bundle.summary["notes"]) == 2
    assert all(note["bound_value"] > 0 for note in bundle.summary["notes"])
    assert all(note["bound"].startswith("gradient norm lower bound") for note in bundle.summary["notes"])


# Optimization experiments


def test_sparse_benchmark(tmp_path):
    bundle = run_experiment(config("experiment = SparseBenchmark\nseeds = [0, 1]\n" + QUICK))
    table = bundle.tables["benchmark"]
    assert list(table.columns) == BENCHMARK_COLUMNS
    assert list(table["method"]) == ["spg", "adam", "spg", "adam"]
    assert list(table["seed"]) == [0, 0, 1, 1]
    assert len(bundle.tables["timings"]) == 4
    assert len(bundle.reports) == 4
    spg, adam = table.iloc[0], table.iloc[1]
    assert spg["nnz"] < adam["nnz"]
    assert spg["delta"] == 1e-6
    assert math.isnan(adam["delta"])

    written = write_bundle(bundle, tmp_path)
    names = {path.name for path in written}
    assert {"benchmark.csv", "timings.csv", "summary.json", "manifest.json"} <= names
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["error_rows"] == 0
    assert "benchmark.csv" in manifest["files"]
    assert "wall_seconds" not in (tmp_path / "benchmark.csv").read_text().splitlines()[0]


def test_reruns_are_byte_identical(tmp_path):
    text = "experiment = SparseBenchmark\nseeds = [3, 4]\n" + QUICK
    write_bundle(run_experiment(config(text), workers=1), tmp_path / "a")
    write_bundle(run_experiment(config(text), workers=2), tmp_path / "b")
    for name in ("benchmark.csv",):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_failed_items_become_error_rows():
    cfg = config(
        "experiment = SparseBenchmark\nseeds = [0]\ngraph { d = 5 }\ndata { n = 100 }\n"
        "optim { inner_max = 100  outer_max = 3 }",
        'methods=[{ name = "bad"  constraint { kind = Ahoc } }, '
        '{ name = "good"  constraint { kind = SmoothedAhoc } }]',
    )
    bundle = run_experiment(cfg)
    table = bundle.tables["benchmark"]
    assert list(table["status"].iloc[:1]) == ["Error"]
    assert table["status"].iloc[1] != "Error"
    assert bundle.error_rows == 1
    assert bundle.manifest["error_rows"] == 1
    assert "ValueError" in bundle.summary["errors"][0]["error"]
    aggregates = {row["method"]: row for row in bundle.summary["aggregates"]}
    assert math.isnan(aggregates["bad"]["median_wall_seconds"])
    assert aggregates["good"]["median_wall_seconds"] > 0


def test_near_cyclic_history():
    cfg = config(
        "experiment = NearCyclic\nseeds = [0]\ndata { n = 200 }\n"
        "optim { inner_max = 100  outer_max = 2 }\n"
        'methods = [{ name = "spg"  constraint { kind = SmoothedAhoc  delta = 1e-8 } }]'
    )
    bundle = run_experiment(cfg)
    history = bundle.tables["history"]
    assert set(history["method"]) == {"spg"}
    assert 1 <= len(history) <= 2
    assert bundle.summary["hessian_condition_at_truth"]["spg"] > 0


def test_delta_sensitivity():
    cfg = config(
        "experiment = DeltaSensitivity\nseeds = [0]\n" + QUICK,
        "sweep.delta_values=[1e-8, 1e-6]",
    )
    bundle = run_experiment(cfg)
    assert list(bundle.tables["benchmark"]["delta"]) == [1e-8, 1e-6]
    assert set(bundle.summary["shd_identical_across_delta"]) == {"0"}


def test_lambda_trajectory():
    cfg = config(
        "experiment = LambdaTrajectory\nseeds = [0]\n" + QUICK,
        "sweep.lambda_values=[0.1, 1.0]",
    )
    bundle = run_experiment(cfg)
    trajectory = bundle.tables["trajectory"]
    assert set(trajectory["lambda1"]) == {0.1, 1.0}
    assert [note["lambda1"] for note in bundle.summary["notes"]] == [0.1, 1.0]


def test_scalability():
    cfg = config("experiment = Scalability\nseeds = [0]\n" + QUICK, "sweep.d_values=[4, 6]")
    table = run_experiment(cfg).tables["benchmark"]
    assert list(table["d"]) == [4, 4, 6, 6]


def test_fit_csv(tmp_path):
    dataset = generate_dataset(GraphSpec(4, 3, seed=1), 300)
    save_dataset(dataset, tmp_path / "data")
    cfg = config(
        "experiment = FitCsv\nseeds = [0]\n"
        f'data {{ path = "{tmp_path / "data" / "data.csv"}"  '
        f'truth_path = "{tmp_path / "data" / "truth.csv"}" }}\n'
        "optim { inner_max = 200  outer_max = 3 }\n"
        'methods = [{ name = "spg"  constraint { kind = SmoothedAhoc } }]'
    )
    bundle = run_experiment(cfg)
    assert set(bundle.matrices) == {"spg"}
    written = write_bundle(bundle, tmp_path / "out")
    assert tmp_path / "out" / "W_spg.csv" in written
    row = bundle.tables["benchmark"].iloc[0]
    assert row["d"] == 4
    assert not math.isnan(row["shd"])
