import pytest
import json

import sparsedag
from sparsedag.cli import main
from sparsedag.sem import GraphSpec, generate_dataset, save_adjacency_csv


def test_version(capsys):
    assert main(["version"]) == 0
    assert capsys.readouterr().out.strip() == sparsedag.__version__


def test_usage_error():
    assert main(["frobnicate"]) == 1
    assert main(["score"]) == 1


def test_score_identical_matrices(tmp_path, capsys):
    w = generate_dataset(GraphSpec(6, 6, seed=0), 2).w_true
    save_adjacency_csv(w, tmp_path / "w.csv")
    assert main(["score", str(tmp_path / "w.csv"), str(tmp_path / "w.csv")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert "shd=0" in out
    assert "support_match=True" in out


def test_score_bad_file(tmp_path, capsys):
    (tmp_path / "w.csv").write_text("0,1\n1\n")
    assert main(["score", str(tmp_path / "w.csv"), str(tmp_path / "w.csv")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_run_missing_config(tmp_path, capsys):
    path = tmp_path / "missing.conf"
    assert main(["run", str(path)]) == 1
    assert str(path) in capsys.readouterr().err


def test_run_bad_override(tmp_path, capsys):
    path = tmp_path / "rho.conf"
    path.write_text("schema_version = 1\nexperiment = GradVsRho\nseeds = [0]\n")
    assert main(["run", str(path), "--set", "optim.lambda1=-1"]) == 1
    assert "optim" in capsys.readouterr().err


def test_run_writes_reports(tmp_path, capsys):
    path = tmp_path / "rho.conf"
    path.write_text(
        "schema_version = 1\nexperiment = GradVsRho\nseeds = [0]\n"
        "constraints = [{ kind = Exp }]\nsweep.rho_values = [0.5, 0.9]\n"
    )
    out = tmp_path / "out"
    assert main(["-q", "run", str(path), "--output-dir", str(out), "--workers", "2"]) == 0
    assert (out / "gradients.csv").read_text().count("\n") == 3
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["workers"] == 2
    assert manifest["config"]["experiment"] == "GradVsRho"
    assert "Wrote" in capsys.readouterr().out


def test_gen_then_check(tmp_path, capsys):
    out = tmp_path / "data"
    assert main(["gen", "--d", "5", "--n", "500", "--seed", "3", "--out", str(out)]) == 0
    assert {p.name for p in out.iterdir()} == {"data.csv", "truth.csv", "provenance.json"}
    capsys.readouterr()

    assert main(["check", str(out / "data.csv"), str(out / "truth.csv"), "--lambda1", "10"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert "stability_ok=True" in lines
    assert any(line.startswith("gamma_hat=") for line in lines)


def test_gen_near_cyclic(tmp_path):
    out = tmp_path / "cyclic"
    assert main(["gen", "--near-cyclic", "--n", "50", "--out", str(out)]) == 0
    provenance = json.loads((out / "provenance.json").read_text())
    assert provenance["near_cyclic"] is True


@pytest.mark.parametrize("flag", ["-v", "-q"])
def test_verbosity_flags(flag, capsys):
    assert main([flag, "version"]) == 0
