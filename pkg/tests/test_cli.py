"""Command-line interface: subcommands, exit codes, artifacts."""

from click.testing import CliRunner

from jnfvae.cli import main
from jnfvae.config import config_to_text
from jnfvae.datasets import load_dataset

from test_config_pipeline import small_cfg


def _write_cfg(tmp_path, cfg):
    path = tmp_path / "config.txt"
    path.write_text(config_to_text(cfg))
    return str(path)


class TestCli:
    def test_toy_gen_and_ingest(self, tmp_path):
        runner = CliRunner()
        out = tmp_path / "toy"
        result = runner.invoke(main, ["toy-gen", "--out", str(out), "--n-samples", "32"])
        assert result.exit_code == 0, result.output
        ds = load_dataset(out)
        assert len(ds) == 32
        result = runner.invoke(main, ["ingest", "--path", str(out)])
        assert result.exit_code == 0
        assert "2 modalities" in result.output

    def test_toy_gen_invalid_config_exits_2(self, tmp_path):
        runner = CliRunner()
        result = runner.invoke(
            main, ["toy-gen", "--out", str(tmp_path / "x"), "--fill-probability", "2.0"]
        )
        assert result.exit_code == 2

    def test_invalid_config_file_exits_2(self, tmp_path):
        cfg_path = tmp_path / "config.txt"
        cfg_path.write_text("variant=bogus\n")
        runner = CliRunner()
        result = runner.invoke(
            main, ["train-joint", "-c", str(cfg_path), "-d", str(tmp_path / "run")]
        )
        assert result.exit_code == 2
        assert "config invalid" in result.output

    def test_train_dcca_wrong_variant_exits_2(self, tmp_path):
        cfg = small_cfg(variant="jnf")
        runner = CliRunner()
        result = runner.invoke(
            main, ["train-dcca", "-c", _write_cfg(tmp_path, cfg), "-d", str(tmp_path / "run")]
        )
        assert result.exit_code == 2

    def test_stage_failure_exits_3(self, tmp_path):
        cfg = small_cfg()
        cfg.dataset.kind = "disk"
        cfg.dataset.path = str(tmp_path / "missing")
        runner = CliRunner()
        result = runner.invoke(
            main, ["train-joint", "-c", _write_cfg(tmp_path, cfg), "-d", str(tmp_path / "run")]
        )
        assert result.exit_code == 3

    def test_stagewise_training_then_eval_and_report(self, tmp_path):
        cfg = small_cfg()
        cfg_path = _write_cfg(tmp_path, cfg)
        run_dir = str(tmp_path / "run")
        runner = CliRunner()
        for cmd in ("train-joint", "train-posteriors", "train-classifiers"):
            result = runner.invoke(main, [cmd, "-c", cfg_path, "-d", run_dir])
            assert result.exit_code == 0, f"{cmd}: {result.output}"
        result = runner.invoke(main, ["eval", "-c", cfg_path, "-d", run_dir])
        assert result.exit_code == 0
        assert "coherence" in result.output
        result = runner.invoke(main, ["report", "-d", run_dir])
        assert result.exit_code == 0
        assert (tmp_path / "run" / "plots" / "metrics.txt").exists()
        assert (tmp_path / "run" / "plots" / "latent_scatter.png").exists()

    def test_sample_exports_binary_with_manifest(self, tmp_path):
        cfg = small_cfg()
        cfg_path = _write_cfg(tmp_path, cfg)
        run_dir = str(tmp_path / "run")
        runner = CliRunner()
        result = runner.invoke(
            main,
            ["sample", "-c", cfg_path, "-d", run_dir, "--source", "0", "--target", "1", "--n", "4"],
        )
        assert result.exit_code == 0, result.output
        bin_path = tmp_path / "run" / "samples" / "gen_0_to_1_0.bin"
        manifest = tmp_path / "run" / "samples" / "gen_0_to_1_0.manifest.txt"
        assert bin_path.exists() and manifest.exists()
        text = manifest.read_text()
        assert "shape=4,32,32" in text

    def test_override_flag_applies(self, tmp_path):
        cfg = small_cfg()
        cfg_path = _write_cfg(tmp_path, cfg)
        runner = CliRunner()
        result = runner.invoke(
            main,
            ["train-joint", "-c", cfg_path, "-d", str(tmp_path / "run"),
             "-o", "training.epochs_step1=1"],
        )
        assert result.exit_code == 0
        config_written = (tmp_path / "run" / "config.txt").read_text()
        assert "training.epochs_step1=1" in config_written
