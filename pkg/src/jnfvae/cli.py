"""Command-line entry points mirroring the pipeline stages.

Each training command runs the pipeline up to its stage, resuming any
stage whose checkpoint already matches the config. Exit codes: 0 on
success, 2 for an invalid config, 3 when a stage fails.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from . import arrayio
from .config import ExperimentConfig, load_config
from .datasets import ToyConfig, generate_toy_dataset, load_dataset, save_dataset
from .pipeline import ablation_sweep, run_pipeline
from .report import render_report
from .validation import ConfigError, StageFailure

EXIT_CONFIG_INVALID = 2
EXIT_STAGE_FAILURE = 3


def _load(config_path: str, overrides: tuple[str, ...]) -> ExperimentConfig:
    try:
        return load_config(config_path, list(overrides))
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        click.echo(f"config invalid: {exc}", err=True)
        sys.exit(EXIT_CONFIG_INVALID)


def _run(cfg: ExperimentConfig, run_dir: str, until: str) -> None:
    try:
        record = run_pipeline(cfg, run_dir, until=until)
    except StageFailure as exc:
        click.echo(str(exc), err=True)
        sys.exit(EXIT_STAGE_FAILURE)
    for stage, seconds in record.stage_seconds.items():
        resumed = " (resumed)" if stage in record.stages_loaded else ""
        click.echo(f"{stage}: {seconds:.1f}s{resumed}")


config_option = click.option("--config", "-c", "config_path", required=True, type=click.Path())
run_dir_option = click.option("--run-dir", "-d", required=True, type=click.Path())
override_option = click.option(
    "--set", "-o", "overrides", multiple=True, help="override a config key, e.g. -o flow.n_blocks=3"
)


@click.group()
def main():
    """Two-stage multimodal VAE experiments."""


@main.command("toy-gen")
@click.option("--out", required=True, type=click.Path())
@click.option("--n-samples", default=1000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--image-side", default=32, show_default=True)
@click.option("--fill-probability", default=0.5, show_default=True)
@click.option("--shared-size-bit", is_flag=True, default=False)
def toy_gen(out, n_samples, seed, image_side, fill_probability, shared_size_bit):
    """Generate the paired squares/circles dataset to a directory."""
    try:
        cfg = ToyConfig(
            image_side=image_side,
            n_samples=n_samples,
            seed=seed,
            fill_probability=fill_probability,
            shared_size_bit=shared_size_bit,
        )
        dataset = generate_toy_dataset(cfg)
    except ValueError as exc:
        click.echo(f"config invalid: {exc}", err=True)
        sys.exit(EXIT_CONFIG_INVALID)
    save_dataset(dataset, out)
    click.echo(f"wrote {len(dataset)} samples to {out}")


@main.command()
@click.option("--path", required=True, type=click.Path(exists=True))
def ingest(path):
    """Validate an on-disk dataset directory and print its summary."""
    try:
        dataset = load_dataset(path)
    except Exception as exc:
        click.echo(f"cannot ingest {path}: {exc}", err=True)
        sys.exit(EXIT_STAGE_FAILURE)
    click.echo(f"{len(dataset)} samples, {dataset.n_modalities} modalities")
    for spec in dataset.specs:
        click.echo(f"  {spec.name}: shape={spec.shape} family={spec.likelihood_family}")


@main.command("train-joint")
@config_option
@run_dir_option
@override_option
def train_joint(config_path, run_dir, overrides):
    """Stage 1: fit the joint encoder and decoders."""
    _run(_load(config_path, overrides), run_dir, until="joint")


@main.command("train-dcca")
@config_option
@run_dir_option
@override_option
def train_dcca(config_path, run_dir, overrides):
    """Fit the shared-information embeddings (jnf_dcca variant)."""
    cfg = _load(config_path, overrides)
    if cfg.variant != "jnf_dcca":
        click.echo("config invalid: train-dcca requires variant=jnf_dcca", err=True)
        sys.exit(EXIT_CONFIG_INVALID)
    _run(cfg, run_dir, until="dcca")


@main.command("train-classifiers")
@config_option
@run_dir_option
@override_option
def train_classifiers(config_path, run_dir, overrides):
    """Fit the per-modality label classifiers used by coherence/FID."""
    _run(_load(config_path, overrides), run_dir, until="classifiers")


@main.command("train-posteriors")
@config_option
@run_dir_option
@override_option
def train_posteriors(config_path, run_dir, overrides):
    """Stage 2: fit the unimodal posteriors against the frozen joint model."""
    _run(_load(config_path, overrides), run_dir, until="posteriors")


@main.command("eval")
@config_option
@run_dir_option
@override_option
def evaluate(config_path, run_dir, overrides):
    """Run the evaluation suite and write metrics/report.txt."""
    _run(_load(config_path, overrides), run_dir, until="eval")
    report = Path(run_dir) / "metrics" / "report.txt"
    click.echo(report.read_text())


@main.command("sample")
@config_option
@run_dir_option
@override_option
@click.option("--source", type=int, required=True, help="conditioning modality index")
@click.option("--target", type=int, required=True, help="generated modality index")
@click.option("--index", type=int, default=0, show_default=True, help="eval-sample row")
@click.option("--n", type=int, default=16, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def sample(config_path, run_dir, overrides, source, target, index, n, seed):
    """Generate one modality conditioned on another; export arrays."""
    cfg = _load(config_path, overrides)
    try:
        from .pipeline import Pipeline

        pipe = Pipeline(cfg, run_dir)
        pipe.run(until="posteriors")
        import torch

        from .validation import as_tensor, new_generator

        x_src = pipe.eval_set.modalities[source][index]
        cond = pipe.posteriors.conditioning_for(source, as_tensor(x_src))
        stack = pipe.posteriors.stacks_[source]
        with torch.no_grad():
            z = stack.sample(cond, n, generator=new_generator(seed))
            params = pipe.joint.model_.decode(z)[target]
        out_dir = Path(run_dir) / "samples"
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = f"gen_{source}_to_{target}_{index}"
        dtype, shape = arrayio.save_raw(out_dir / f"{stem}.bin", params.numpy())
        arrayio.write_manifest(
            out_dir / f"{stem}.manifest.txt",
            {
                "file": f"{stem}.bin",
                "dtype": dtype,
                "shape": shape,
                "source_modality": str(source),
                "target_modality": str(target),
                "sample_index": str(index),
                "seed": str(seed),
            },
        )
        click.echo(f"wrote {n} generations to {out_dir / (stem + '.bin')}")
    except StageFailure as exc:
        click.echo(str(exc), err=True)
        sys.exit(EXIT_STAGE_FAILURE)


@main.command("sweep")
@config_option
@run_dir_option
@override_option
@click.option("--axis", type=click.Choice(["flow_depth", "dcca_dim"]), required=True)
@click.option("--values", required=True, help="comma-separated axis values")
def sweep(config_path, run_dir, overrides, axis, values):
    """Run the pipeline once per axis value, sharing unaffected stages."""
    cfg = _load(config_path, overrides)
    try:
        vals = [int(v) for v in values.split(",")]
    except ValueError:
        click.echo("config invalid: --values must be comma-separated integers", err=True)
        sys.exit(EXIT_CONFIG_INVALID)
    try:
        results = ablation_sweep(cfg, axis, vals, run_dir)
    except StageFailure as exc:
        click.echo(str(exc), err=True)
        sys.exit(EXIT_STAGE_FAILURE)
    for value, rep in results:
        coh = ", ".join(f"{k}={v:.3f}" for k, v in sorted(rep.coherence.items()))
        click.echo(f"{axis}={value:g}: {coh}")


@main.command("report")
@run_dir_option
@click.option("--out", type=click.Path(), default=None, help="output directory (default run_dir/plots)")
def report(run_dir, out):
    """Render tables and figures from a run directory."""
    files = render_report(run_dir, out)
    for path in files:
        click.echo(str(path))


if __name__ == "__main__":
    main()
