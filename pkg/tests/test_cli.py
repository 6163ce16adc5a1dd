import math

import numpy as np
import pytest

from dcdl.cli import main, read_points
from dcdl.data import load_dataset, save_dataset, synth_gaussian_mixture, synth_train_test


CONFIG = """
dataset.synth_classes=3
dataset.synth_train_per_class=20
dataset.synth_test_per_class=6
dataset.synth_dim=4
model.embedding_dim=3
optimizer.epochs=1
optimizer.learning_rate=0.01
eval.probe_epochs=10
eval.ks=1,2
"""


def _records(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


def test_ot_reports_costs(capsys):
    assert main(["ot", "--a", "0;1", "--b", "2"]) == 0
    out = _records(capsys.readouterr().out)
    assert out["epsilon"] == "0.0025"
    assert float(out["exact_cost"]) == pytest.approx(1.25)
    assert float(out["sinkhorn_cost"]) == pytest.approx(1.25)
    assert out["converged"] == "true"


def test_ot_reads_point_files_and_weights(tmp_path, capsys):
    points = tmp_path / "a.txt"
    points.write_text("# one point per line\n0.0\n1.0\n", encoding="utf-8")
    assert main(["ot", "--a", str(points), "--a-weights", "3,1", "--b", "0", "--epsilon", "0.1"]) == 0
    out = _records(capsys.readouterr().out)
    assert float(out["exact_cost"]) == pytest.approx(0.25 * 0.5)


def test_unconverged_solve_exits_with_numerical_status(capsys):
    assert main(["ot", "--a", "0;1;2", "--b", "0.5;3", "--max-iterations", "1"]) == 2
    assert _records(capsys.readouterr().out)["converged"] == "false"


def test_metrics_flag_prints_counters(capsys):
    assert main(["--metrics", "ot", "--a", "0", "--b", "1"]) == 0
    assert "sinkhorn_solves_total" in capsys.readouterr().err


def test_divergence_kinds(capsys):
    assert main(["divergence", "--kind", "mmd_laplacian", "--sigma", "0.05", "--a", "0,0", "--b", "0.05,0"]) == 0
    value = float(_records(capsys.readouterr().out)["value"])
    assert value == pytest.approx(2.0 - 2.0 * math.exp(-1.0), abs=1e-6)
    assert main(["divergence", "--kind", "energy", "--a", "0,0", "--b", "3,4"]) == 0
    assert float(_records(capsys.readouterr().out)["value"]) == pytest.approx(12.5)
    assert main(["divergence", "--kind", "sinkhorn_divergence", "--a", "0;1", "--b", "0;1", "--epsilon", "0.1"]) == 0
    assert abs(float(_records(capsys.readouterr().out)["value"])) <= 1e-8


def test_bad_points_are_usage_errors(capsys):
    assert main(["ot", "--a", "0,1;2", "--b", "0"]) == 1
    assert "different dimensions" in capsys.readouterr().err
    with pytest.raises(ValueError):
        read_points("")


def test_missing_arguments_exit_with_usage_status():
    with pytest.raises(SystemExit) as excinfo:
        main([])
    assert excinfo.value.code == 1
    with pytest.raises(SystemExit) as excinfo:
        main(["ot", "--a", "0"])
    assert excinfo.value.code == 1


def test_noise_command_writes_noisy_labels(tmp_path, capsys):
    source = tmp_path / "data.csv"
    target = tmp_path / "noisy.csv"
    dataset = synth_gaussian_mixture(4, 50, 2, 3.0, seed=0)
    save_dataset(dataset, source)
    args = ["noise", "--dataset", str(source), "--kind", "symmetric", "--delta", "0.5", "--seed", "3"]
    assert main(args + ["--output", str(target)]) == 0
    out = _records(capsys.readouterr().out)
    noisy = load_dataset(target, num_classes=4)
    assert np.array_equal(noisy.features, dataset.features)
    assert int(out["changed"]) == int(np.sum(noisy.labels != dataset.labels))
    assert out["total"] == "200"


def test_noise_command_asymmetric_map(tmp_path, capsys):
    source = tmp_path / "data.csv"
    save_dataset(synth_gaussian_mixture(2, 10, 2, 3.0, seed=0), source)
    args = ["noise", "--dataset", str(source), "--kind", "asymmetric", "--delta", "1", "--map", "0:1"]
    assert main(args) == 0
    assert _records(capsys.readouterr().out)["changed"] == "10"


def test_train_then_eval(tmp_path, capsys):
    config = tmp_path / "run.cfg"
    checkpoint = tmp_path / "model.ckpt"
    results = tmp_path / "run.results"
    config.write_text(CONFIG + f"output.checkpoint={checkpoint}\n", encoding="utf-8")
    assert main(["train", "--config", str(config), "--output", str(results)]) == 0
    out = _records(capsys.readouterr().out)
    assert out["results"] == str(results)
    assert "accuracy" in out
    assert results.read_text(encoding="utf-8").startswith("# dcdl-results 1\n")

    train_set, test_set = synth_train_test(3, 20, 6, 4, 4.0, seed=0)
    save_dataset(train_set, tmp_path / "train.csv")
    save_dataset(test_set, tmp_path / "test.csv")
    args = ["eval", "--checkpoint", str(checkpoint), "--train", str(tmp_path / "train.csv")]
    assert main(args + ["--test", str(tmp_path / "test.csv"), "--ks", "1,2", "--probe-epochs", "10"]) == 0
    records = _records(capsys.readouterr().out)
    assert set(records) == {"accuracy", "nmi", "recall@1", "recall@2"}


def test_train_reruns_results_file(tmp_path, capsys):
    config = tmp_path / "run.cfg"
    config.write_text(CONFIG, encoding="utf-8")
    first, second = tmp_path / "first.results", tmp_path / "second.results"
    assert main(["train", "--config", str(config), "--output", str(first)]) == 0
    assert main(["train", "--config", str(first), "--output", str(second)]) == 0
    assert first.read_bytes() == second.read_bytes()


def test_train_config_errors(tmp_path, capsys):
    config = tmp_path / "run.cfg"
    config.write_text(CONFIG, encoding="utf-8")
    assert main(["train", "--config", str(config), "--set", "loss.bogus=1", "--output", str(tmp_path / "r")]) == 1
    assert "config error: loss.bogus" in capsys.readouterr().err
    assert main(["train", "--config", str(config)]) == 1
    assert "output.path" in capsys.readouterr().err


def test_compare_prints_summary(tmp_path, capsys):
    config = tmp_path / "run.cfg"
    config.write_text(CONFIG, encoding="utf-8")
    args = ["compare", "--config-a", str(config), "--config-b", str(config), "--seeds", "0,1"]
    assert main(args + ["--set-b", "loss.discrepancy=mmd_gaussian"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("seed,accuracy_a,accuracy_b\n0,")
    assert {"mean_a", "mean_b", "wins_b", "welch_t"} <= set(_records(out))


def test_selftest_command(capsys):
    assert main(["selftest", "--check", "metric_sanity", "--check", "kernel_duality"]) == 0
    out = capsys.readouterr().out
    assert "PASS metric_sanity" in out
    assert out.rstrip().endswith("summary passed=2 failed=0")


def test_selftest_failure_exits_with_numerical_status(monkeypatch, capsys):
    monkeypatch.setattr("dcdl.discrepancy._laplacian_kernel", lambda d, sigma: np.exp(-2.0 * d / sigma))
    assert main(["selftest", "--check", "mmd_gradient"]) == 2
    assert "FAIL mmd_gradient" in capsys.readouterr().out
