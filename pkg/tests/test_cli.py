import json

import pytest
from typer.testing import CliRunner

from netdeconv.cli.router import EXIT_BAD_INPUT, EXIT_NUMERICAL, app, build_manifest
from netdeconv.errors import NumericalFailureError
from netdeconv.models.experiment import ExperimentManifest
from netdeconv.services import experiments


@pytest.fixture
def runner():
    return CliRunner()


def test_converge_command(runner, tmp_path):
    result = runner.invoke(app, ["converge", "--synthetic", "--self-check", "--out", str(tmp_path)])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "converge_summary.csv").exists()
    manifest = ExperimentManifest.read(tmp_path / "manifest.json")
    assert manifest.option("synthetic") and manifest.option("self_check")


def test_missing_image_is_bad_input(runner, tmp_path):
    result = runner.invoke(app, ["ns-bench", "--image", str(tmp_path / "no_existe.pgm"),
                                 "--out", str(tmp_path)])
    assert result.exit_code == EXIT_BAD_INPUT


def test_malformed_config_is_bad_input(runner, tmp_path):
    config = tmp_path / "config.json"
    config.write_text("{ no es json", encoding="utf-8")
    result = runner.invoke(app, ["converge", "--config", str(config), "--out", str(tmp_path)])
    assert result.exit_code == EXIT_BAD_INPUT


def test_invalid_config_values_are_bad_input(runner, tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"whitening": {"eps": -1}}), encoding="utf-8")
    result = runner.invoke(app, ["converge", "--config", str(config), "--out", str(tmp_path)])
    assert result.exit_code == EXIT_BAD_INPUT


def test_numerical_failure_exit_code(runner, tmp_path, monkeypatch):
    def explode(manifest):
        raise NumericalFailureError("residuo no finito", step=7, layer_index=2)

    monkeypatch.setitem(experiments.EXPERIMENTS, "converge", explode)
    result = runner.invoke(app, ["converge", "--synthetic", "--out", str(tmp_path)])
    assert result.exit_code == EXIT_NUMERICAL


def test_repeated_seeds_get_their_own_directories(runner, tmp_path):
    result = runner.invoke(app, ["converge", "--synthetic", "--out", str(tmp_path),
                                 "--seed", "1", "--seed", "2"])
    assert result.exit_code == 0, result.output
    for seed in (1, 2):
        manifest = ExperimentManifest.read(tmp_path / f"seed_{seed}" / "manifest.json")
        assert manifest.seed == seed
    first = (tmp_path / "seed_1" / "converge_summary.csv").read_text(encoding="utf-8")
    second = (tmp_path / "seed_2" / "converge_summary.csv").read_text(encoding="utf-8")
    assert first != second


def test_replay_reproduces_csv(runner, tmp_path):
    original = tmp_path / "original"
    replayed = tmp_path / "replayed"
    assert runner.invoke(app, ["converge", "--synthetic", "--out", str(original)]).exit_code == 0
    result = runner.invoke(app, ["replay", str(original / "manifest.json"),
                                 "--out", str(replayed)])
    assert result.exit_code == 0, result.output
    name = "converge_summary.csv"
    assert (original / name).read_bytes() == (replayed / name).read_bytes()


def test_replay_missing_manifest(runner, tmp_path):
    result = runner.invoke(app, ["replay", str(tmp_path / "manifest.json")])
    assert result.exit_code == EXIT_BAD_INPUT


def test_build_manifest_precedence(tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({
        "seed": 5,
        "config": {"lr": 0.5, "epochs": 3},
        "whitening": {"eps": 1e-3},
        "options": {"train_count": 100},
    }), encoding="utf-8")
    manifest = build_manifest("mlp", out=tmp_path / "out", seed=9, config_path=config,
                              uncentered=True, config={"lr": 0.2, "epochs": None},
                              options={"train_count": 10, "test_count": None})
    assert manifest.seed == 9
    assert manifest.config.lr == 0.2 and manifest.config.epochs == 3
    assert manifest.whitening.eps == 1e-3 and not manifest.whitening.centered
    assert manifest.options == {"train_count": 10}
    assert manifest.out_dir == tmp_path / "out"
