"""Integration tests for CLI commands using Click CliRunner."""

import csv

import pytest
import yaml

from diffound_mad.core import checkpoint
from diffound_mad.errors import ExitCode
from diffound_mad.main import cli

TWO_TOOLS = "data.synth.artefact_models=[landmark_like, diffusion_like]"
TINY_SYNTH = ["image_size=16", "num_identities=6", "captures_per_identity=3", "morphs_per_identity=1"]


def _rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def _set(items):
    return [arg for item in items for arg in ("--set", item)]


@pytest.fixture
def trained_run(cli_runner, experiment_file, tmp_path):
    run_dir = tmp_path / "run"
    result = cli_runner.invoke(cli, ["train", "-c", experiment_file, "-o", str(run_dir)])
    assert result.exit_code == 0, result.output
    return run_dir


@pytest.mark.integration
@pytest.mark.cli
class TestCLIIntegration:
    def test_cli_help(self, cli_runner):
        result = cli_runner.invoke(cli, ["--help"])
        assert result.exit_code == 0
        for verb in ("gen-data", "train", "eval", "grid", "protocol", "metrics", "config", "version"):
            assert verb in result.output

    def test_version_option(self, cli_runner):
        result = cli_runner.invoke(cli, ["--version"])
        assert result.exit_code == 0
        assert "diffound" in result.output

    def test_version_command(self, cli_runner):
        result = cli_runner.invoke(cli, ["version"])
        assert result.exit_code == 0
        assert "numpy" in result.output


@pytest.mark.integration
@pytest.mark.cli
class TestTrainEval:
    def test_train_writes_run_directory(self, trained_run):
        for name in ("checkpoint.npz", "loss.csv", "run.yaml"):
            assert (trained_run / name).exists()
        manifest = yaml.safe_load((trained_run / "run.yaml").read_text())
        assert manifest["kind"] == "train"
        assert manifest["seed"] == 3
        assert "checkpoint.npz" in manifest["artifacts"]
        assert len(_rows(trained_run / "loss.csv")) == 1

    def test_seed_and_epoch_flags(self, cli_runner, experiment_file, tmp_path):
        run_dir = tmp_path / "flags"
        result = cli_runner.invoke(
            cli, ["train", "-c", experiment_file, "--set", "train.epochs=3", "--epochs", "2", "--seed", "9",
                  "-o", str(run_dir)]
        )
        assert result.exit_code == 0, result.output
        manifest = yaml.safe_load((run_dir / "run.yaml").read_text())
        assert manifest["seed"] == 9
        assert manifest["config"]["train"]["seed"] == 9
        assert manifest["epochs"] == 2

    def test_eval_on_config_test_split(self, cli_runner, experiment_file, trained_run):
        result = cli_runner.invoke(cli, ["eval", "-k", str(trained_run), "-c", experiment_file])
        assert result.exit_code == 0, result.output
        for name in ("scores.csv", "report.yaml", "diagnostics.yaml", "det.csv", "det.svg"):
            assert (trained_run / name).exists()
        report = yaml.safe_load((trained_run / "report.yaml").read_text())
        assert 0.0 <= report["d_eer"] <= 100.0

    def test_eval_on_generated_dataset(self, cli_runner, trained_run, tmp_path):
        data_dir = tmp_path / "data"
        result = cli_runner.invoke(cli, ["gen-data", *_set(TINY_SYNTH), "--seed", "5", "-o", str(data_dir)])
        assert result.exit_code == 0, result.output
        out_dir = tmp_path / "eval"
        result = cli_runner.invoke(
            cli, ["eval", "-k", str(trained_run / "checkpoint.npz"), "-d", str(data_dir), "--split", "all",
                  "-o", str(out_dir), "--no-plot", "--resolution", "5"]
        )
        assert result.exit_code == 0, result.output
        assert not (out_dir / "det.svg").exists()
        assert len(_rows(out_dir / "det.csv")) <= 5
        manifest_rows = _rows(data_dir / "manifest.csv")
        assert len(_rows(out_dir / "scores.csv")) == len(manifest_rows)

    def test_eval_needs_data_source(self, cli_runner, trained_run):
        result = cli_runner.invoke(cli, ["eval", "-k", str(trained_run)])
        assert result.exit_code == 2

    def test_metrics_from_score_file(self, cli_runner, experiment_file, trained_run, tmp_path):
        cli_runner.invoke(cli, ["eval", "-k", str(trained_run), "-c", experiment_file, "--no-plot"])
        out_dir = tmp_path / "metrics"
        result = cli_runner.invoke(cli, ["metrics", str(trained_run / "scores.csv"), "-o", str(out_dir)])
        assert result.exit_code == 0, result.output
        assert yaml.safe_load((out_dir / "report.yaml").read_text()) == yaml.safe_load(
            (trained_run / "report.yaml").read_text()
        )
        assert (out_dir / "det.csv").read_text() == (trained_run / "det.csv").read_text()


@pytest.mark.integration
@pytest.mark.cli
class TestGenData:
    def test_identity_split(self, cli_runner, tmp_path):
        out = tmp_path / "ds"
        result = cli_runner.invoke(cli, ["gen-data", *_set(TINY_SYNTH), "--format", "png", "-o", str(out)])
        assert result.exit_code == 0, result.output
        meta = yaml.safe_load((out / "dataset.yaml").read_text())
        assert set(meta["counts"]) == {"train", "test"}
        assert meta["storage_format"] == "png"
        assert meta["protocol_split"] == "identity"
        assert meta["generator"]["seed"] == 0

    def test_loo_split(self, cli_runner, tmp_path):
        out = tmp_path / "loo"
        result = cli_runner.invoke(
            cli, ["gen-data", *_set(TINY_SYNTH), "--set", TWO_TOOLS, "--protocol-split", "loo", "-o", str(out)]
        )
        assert result.exit_code == 0, result.output
        splits = {row["split"] for row in _rows(out / "manifest.csv")}
        assert len(splits) == 8
        assert "heldout_landmark_like_forward_test" in splits
        assert "heldout_diffusion_like_swapped_train" in splits
        pair_ids = [row["pair_id"] for row in _rows(out / "manifest.csv")]
        assert len(pair_ids) == len(set(pair_ids))

    def test_cross_split(self, cli_runner, tmp_path):
        out = tmp_path / "cross"
        result = cli_runner.invoke(cli, ["gen-data", *_set(TINY_SYNTH), "--protocol-split", "cross", "-o", str(out)])
        assert result.exit_code == 0, result.output
        assert len({row["split"] for row in _rows(out / "manifest.csv")}) == 2

    def test_seed_changes_images(self, cli_runner, tmp_path):
        for seed in ("1", "2"):
            result = cli_runner.invoke(cli, ["gen-data", *_set(TINY_SYNTH), "--seed", seed, "-o", str(tmp_path / seed)])
            assert result.exit_code == 0, result.output
        first = sorted(p.name for p in (tmp_path / "1" / "images").iterdir())[0]
        assert (tmp_path / "1" / "images" / first).read_bytes() != (tmp_path / "2" / "images" / first).read_bytes()


@pytest.mark.integration
@pytest.mark.cli
class TestProtocols:
    def test_unknown_attack_loo(self, cli_runner, experiment_file, tmp_path):
        out = tmp_path / "loo"
        result = cli_runner.invoke(
            cli, ["protocol", "unknown_attack_loo", "-c", experiment_file, "--set", TWO_TOOLS, "-o", str(out)]
        )
        assert result.exit_code == 0, result.output
        rows = _rows(out / "protocol.csv")
        assert len(rows) == 4
        assert {r["test"] for r in rows} == {"landmark_like", "diffusion_like"}
        assert all(r["train"] != r["test"] for r in rows)

    def test_known_attack_cross(self, cli_runner, experiment_file, tmp_path):
        out = tmp_path / "cross"
        result = cli_runner.invoke(cli, ["protocol", "known_attack_cross", "-c", experiment_file, "-o", str(out)])
        assert result.exit_code == 0, result.output
        rows = _rows(out / "protocol.csv")
        assert [r["run"] for r in rows] == ["a_to_b", "b_to_a", "mean"]
        mean = sum(float(r["d_eer"]) for r in rows[:2]) / 2
        assert float(rows[2]["d_eer"]) == pytest.approx(mean)

    def test_ablation_emits_paired_curves(self, cli_runner, experiment_file, tmp_path):
        out = tmp_path / "ablation"
        result = cli_runner.invoke(cli, ["protocol", "ablation_smad", "-c", experiment_file, "-o", str(out)])
        assert result.exit_code == 0, result.output
        for name in ("det_differential.csv", "det_single_image.csv", "det_paired.svg", "protocol.yaml"):
            assert (out / name).exists()
        assert [r["run"] for r in _rows(out / "protocol.csv")] == ["differential", "single_image"]
        single = checkpoint.load_model(out / "single_image" / "checkpoint.npz")
        assert single.mode == "single_image"

    def test_protocol_from_config(self, cli_runner, experiment_file, tmp_path):
        out = tmp_path / "fromcfg"
        result = cli_runner.invoke(
            cli, ["protocol", "-c", experiment_file, "--set", "protocol=ablation_smad", "-o", str(out)]
        )
        assert result.exit_code == 0, result.output
        assert (out / "protocol.csv").exists()

    def test_missing_protocol(self, cli_runner, experiment_file, tmp_path):
        result = cli_runner.invoke(cli, ["protocol", "-c", experiment_file, "-o", str(tmp_path / "none")])
        assert result.exit_code == ExitCode.PROTOCOL


@pytest.mark.integration
@pytest.mark.cli
class TestGrid:
    def test_small_grid(self, cli_runner, experiment_file, tmp_path):
        out = tmp_path / "grid"
        result = cli_runner.invoke(
            cli,
            ["grid", "-c", experiment_file, "--set", "grid.ranks=[2]", "--set", "grid.alphas=[4.0]",
             "--set", "grid.dropouts=[0.2, 0.4]", "-o", str(out)],
        )
        assert result.exit_code == 0, result.output
        rows = _rows(out / "grid.csv")
        assert [(r["rank"], r["dropout"]) for r in rows] == [("2", "0.2"), ("2", "0.4")]
        assert [r["best"] for r in rows].count("true") == 1
        assert all(r["status"] == "ok" for r in rows)
        assert (out / "r2_a4_d0.2" / "identity" / "report.yaml").exists()

    def test_workers_must_be_positive(self, cli_runner, experiment_file, tmp_path):
        result = cli_runner.invoke(cli, ["grid", "-c", experiment_file, "-j", "0", "-o", str(tmp_path)])
        assert result.exit_code == 2

    def test_grid_outside_domain(self, cli_runner, experiment_file, tmp_path):
        result = cli_runner.invoke(cli, ["grid", "-c", experiment_file, "--set", "grid.ranks=[3]", "-o", str(tmp_path)])
        assert result.exit_code == ExitCode.VALIDATION


@pytest.mark.integration
@pytest.mark.cli
class TestConfigCLIIntegration:
    def test_config_show(self, cli_runner, experiment_file):
        result = cli_runner.invoke(cli, ["config", "show", "-c", experiment_file, "--set", "lora.rank=8"])
        assert result.exit_code == 0, result.output
        assert "rank: 8" in result.output

    def test_config_init_and_validate(self, cli_runner, tmp_path):
        path = tmp_path / "new.yaml"
        result = cli_runner.invoke(cli, ["config", "init", str(path), "--seed", "4", "--name", "fresh"])
        assert result.exit_code == 0, result.output
        assert yaml.safe_load(path.read_text())["name"] == "fresh"
        result = cli_runner.invoke(cli, ["config", "validate", str(path)])
        assert result.exit_code == 0, result.output

    def test_config_init_refuses_overwrite(self, cli_runner, tmp_path):
        path = tmp_path / "keep.yaml"
        path.write_text("seed: 1\n")
        result = cli_runner.invoke(cli, ["config", "init", str(path)])
        assert result.exit_code == 1
        assert path.read_text() == "seed: 1\n"
        assert cli_runner.invoke(cli, ["config", "init", str(path), "--force"]).exit_code == 0


@pytest.mark.integration
@pytest.mark.cli
class TestExitCodes:
    def test_missing_seed_is_validation_error(self, cli_runner, tmp_path):
        path = tmp_path / "unseeded.yaml"
        path.write_text("name: unseeded\n")
        result = cli_runner.invoke(cli, ["config", "validate", str(path)])
        assert result.exit_code == ExitCode.VALIDATION
        assert "seed" in result.output

    def test_missing_config_file_is_io_error(self, cli_runner, tmp_path):
        result = cli_runner.invoke(cli, ["train", "-c", str(tmp_path / "absent.yaml")])
        assert result.exit_code == ExitCode.IO

    def test_corrupt_checkpoint_is_io_error(self, cli_runner, experiment_file, tmp_path):
        bad = tmp_path / "bad.npz"
        bad.write_bytes(b"garbage")
        result = cli_runner.invoke(cli, ["eval", "-k", str(bad), "-c", experiment_file])
        assert result.exit_code == ExitCode.IO

    def test_geometry_mismatch_is_compatibility_error(self, cli_runner, trained_run, tmp_path):
        data_dir = tmp_path / "big"
        synth = ["image_size=32", "num_identities=6", "captures_per_identity=3", "morphs_per_identity=1"]
        assert cli_runner.invoke(cli, ["gen-data", *_set(synth), "-o", str(data_dir)]).exit_code == 0
        result = cli_runner.invoke(cli, ["eval", "-k", str(trained_run), "-d", str(data_dir)])
        assert result.exit_code == ExitCode.COMPATIBILITY

    def test_model_and_data_sizes_disagree(self, cli_runner, experiment_file, tmp_path):
        result = cli_runner.invoke(
            cli, ["train", "-c", experiment_file, "--set", "data.synth.image_size=32", "-o", str(tmp_path / "x")]
        )
        assert result.exit_code == ExitCode.PROTOCOL
