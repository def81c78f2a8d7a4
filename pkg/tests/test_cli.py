import numpy as np
import pytest
from PIL import Image

from main import EXIT_DATA_MISSING, EXIT_FAILURE, EXIT_OK, EXIT_PARSE, EXIT_USAGE, main
from services.dataset_service import DatasetService
from services.checkpoint_service import load_checkpoint
from settings import get_settings

SMALL_RUN = ["--layers", "1", "--batch-size", "8", "--train-limit", "8", "--power-iterations", "2", "--seed", "4"]


@pytest.fixture(autouse=True)
def fresh_settings(monkeypatch, tmp_path):
    monkeypatch.setenv("ROTUNROLL_OUTPUT_DIR", str(tmp_path / "runs"))
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


def train_small(mnist_dir, out, *extra) -> int:
    return main(["train", "--model", "r90", "--dataset", "mnist", "--data-dir", str(mnist_dir), "--out", str(out), *SMALL_RUN, *extra])


def test_param_count_reports_the_cifar_breakdown(capsys):
    assert main(["param-count", "--model", "r60"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "filters: 7680" in out
    assert "batchnorm: 360" in out
    assert "head: 610" in out
    assert "reported total: 17890" in out
    assert "difference: 9240 (reported - counted)" in out


@pytest.mark.parametrize("model", ["baseline", "r90", "r60"])
def test_reported_totals_differ_by_a_constant(capsys, model):
    assert main(["param-count", "--model", model]) == EXIT_OK
    lines = dict(line.split(": ", 1) for line in capsys.readouterr().out.splitlines())
    assert int(lines["total"]) == int(lines["filters"]) + int(lines["batchnorm"]) + int(lines["head"])
    assert int(lines["reported total"]) - int(lines["total"]) == 9240


def test_param_count_ratios(capsys):
    counts = {}
    for model in ("baseline", "r90", "r60"):
        main(["param-count", "--model", model, "--dataset", "mnist"])
        line = next(l for l in capsys.readouterr().out.splitlines() if l.startswith("filters:"))
        counts[model] = int(line.split()[1])
    assert counts["baseline"] == 4 * counts["r90"] == 6 * counts["r60"]


def test_train_without_model_is_a_usage_error(tmp_path):
    assert main(["train", "--dataset", "mnist", "--out", str(tmp_path / "x.runl")]) == EXIT_USAGE


def test_unknown_command_is_a_usage_error():
    assert main(["fit"]) == EXIT_USAGE


def test_missing_data_exits_with_data_code(tmp_path):
    assert train_small(tmp_path / "empty", tmp_path / "x.runl", "--epochs", "1") == EXIT_DATA_MISSING


def test_zero_epochs_writes_checkpoint_and_header_only_csv(mnist_dir, tmp_path):
    out = tmp_path / "r90.runl"
    assert train_small(mnist_dir, out, "--epochs", "0") == EXIT_OK
    assert load_checkpoint(out).epoch == 0
    assert (tmp_path / "r90.csv").read_text().splitlines() == [
        "epoch,train_loss,train_acc,test_acc,sparsity,stability_margin"
    ]


def test_config_file_with_flag_precedence(mnist_dir, tmp_path):
    config = tmp_path / "run.conf"
    config.write_text("# small run\nepochs = 3\nlam = 0.2\nthreshold-mode = scaled\n")
    out = tmp_path / "c.runl"
    assert train_small(mnist_dir, out, "--config", str(config), "--epochs", "0") == EXIT_OK
    cfg = load_checkpoint(out).config
    assert cfg.epochs == 0
    assert cfg.lam == 0.2
    assert cfg.threshold_mode == "scaled"
    assert cfg.num_layers == 1


def test_unknown_config_key_is_a_usage_error(mnist_dir, tmp_path):
    config = tmp_path / "run.conf"
    config.write_text("epochs = 1\nwidth = 9\n")
    assert train_small(mnist_dir, tmp_path / "c.runl", "--config", str(config)) == EXIT_USAGE


def test_invalid_config_value_is_a_usage_error(mnist_dir, tmp_path):
    assert train_small(mnist_dir, tmp_path / "c.runl", "--epochs", "-1") == EXIT_USAGE


def test_train_then_eval_and_export(mnist_dir, tmp_path, capsys):
    out = tmp_path / "r90.runl"
    assert train_small(mnist_dir, out, "--epochs", "1", "--alpha", "0.5", "--lam", "0.05") == EXIT_OK
    assert len((tmp_path / "r90.csv").read_text().splitlines()) == 2
    capsys.readouterr()

    assert main(["eval", "--checkpoint", str(out), "--data-dir", str(mnist_dir)]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    accuracy = float(lines[0].split(": ")[1])
    assert 0.0 <= accuracy <= 1.0
    assert lines[1].startswith("loss:") and lines[2].startswith("sparsity:")

    grid = tmp_path / "filters.pgm"
    assert main(["export-filters", "--checkpoint", str(out), "--layer", "0", "--out", str(grid)]) == EXIT_OK
    with Image.open(grid) as image:
        assert image.size == (4 * 8 - 1, 15 * 8 - 1)
    assert main(["export-filters", "--checkpoint", str(out), "--layer", "3", "--out", str(grid)]) == EXIT_USAGE


def test_eval_on_a_generated_dataset_file(mnist_dir, tmp_path, capsys):
    out = tmp_path / "r90.runl"
    assert train_small(mnist_dir, out, "--epochs", "1", "--alpha", "0.5", "--lam", "0.05") == EXIT_OK
    rotated = tmp_path / "rot.runl"
    assert main(["gen-rotmnist", "--data-dir", str(mnist_dir), "--seed", "1", "--out", str(rotated)]) == EXIT_OK
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out), "--dataset-file", str(rotated), "--limit", "5"]) == EXIT_OK
    assert capsys.readouterr().out.startswith("accuracy: ")


def test_corrupt_checkpoint_exits_with_parse_code(tmp_path):
    bad = tmp_path / "bad.runl"
    bad.write_bytes(b"RUNL" + bytes(20))
    assert main(["eval", "--checkpoint", str(bad)]) == EXIT_PARSE
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.runl")]) == EXIT_DATA_MISSING


def test_gen_rotmnist_is_reproducible(mnist_dir, tmp_path, capsys):
    first, second = tmp_path / "a.runl", tmp_path / "b.runl"
    args = ["gen-rotmnist", "--data-dir", str(mnist_dir), "--seed", "9", "--split", "train", "--limit", "12"]
    assert main([*args, "--out", str(first)]) == EXIT_OK
    assert main([*args, "--out", str(second)]) == EXIT_OK
    assert first.read_bytes() == second.read_bytes()
    printed = capsys.readouterr().out.splitlines()
    assert printed[0].startswith("wrote 12 images")
    assert printed[0].split("sha256 ")[1] == printed[1].split("sha256 ")[1]


def test_default_output_goes_to_the_configured_directory(mnist_dir, tmp_path):
    assert main(["train", "--model", "r60", "--dataset", "mnist", "--data-dir", str(mnist_dir), "--epochs", "0"]) == EXIT_OK
    assert (tmp_path / "runs" / "r60-mnist-s0.runl").is_file()
    assert np.isfinite(load_checkpoint(tmp_path / "runs" / "r60-mnist-s0.runl").network.head.weight.data).all()


def test_gen_rotmnist_matches_the_loaded_rotated_split(mnist_dir, tmp_path):
    out = tmp_path / "rot.runl"
    assert main(["gen-rotmnist", "--data-dir", str(mnist_dir), "--seed", "3", "--limit", "6", "--out", str(out)]) == EXIT_OK
    written = DatasetService.load_dataset(out)
    loaded = DatasetService(mnist_dir).load("rot-mnist", "test", 3).head(6)
    np.testing.assert_array_equal(written.images, loaded.images)
    np.testing.assert_array_equal(written.labels, loaded.labels)


def test_default_literal_threshold_refuses_a_dead_start(mnist_dir, tmp_path):
    assert train_small(mnist_dir, tmp_path / "dead.runl", "--epochs", "1") == EXIT_FAILURE
    assert not (tmp_path / "dead.runl").exists()
    assert train_small(mnist_dir, tmp_path / "dead.runl", "--epochs", "1", "--allow-dead-start") == EXIT_OK


def test_documented_scaled_threshold_trains(mnist_dir, tmp_path):
    assert train_small(mnist_dir, tmp_path / "alive.runl", "--epochs", "1", "--threshold-mode", "scaled") == EXIT_OK
