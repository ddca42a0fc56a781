"""Render metrics tables and figures from a completed run directory."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from . import arrayio, checkpoints
from .config import load_config
from .datasets import load_dataset
from .evaluation import EvalReport
from .pipeline import stage_dirs
from .validation import as_tensor, new_generator


def render_report(run_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Write tables and plots for a run; returns the created files.

    Always emits the metrics table and whatever loss curves exist.
    Latent scatter and posterior-density heatmaps are produced for
    2-dimensional latent spaces only; higher dimensions get a note.
    Conditional-generation grids show one source row on top of the
    generated rows.
    """
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir / "plots"
    out_dir.mkdir(parents=True, exist_ok=True)
    dirs = stage_dirs(run_dir)
    created: list[Path] = []

    report_path = dirs["eval"] / "report.txt"
    summary = out_dir / "metrics.txt"
    if report_path.exists():
        summary.write_text(_metrics_table(EvalReport.from_text(report_path.read_text())))
    else:
        summary.write_text("evaluation not run\n")
    created.append(summary)

    created += _plot_loss_curves(dirs, out_dir)
    created += _plot_latents(dirs, out_dir)
    created += _plot_posterior_density(run_dir, dirs, out_dir)
    created += _plot_generation_grids(run_dir, dirs, out_dir)
    return created


def _metrics_table(report: EvalReport) -> str:
    lines = [
        f"model: {report.model_id}",
        f"dataset: {report.dataset_id}   seed: {report.seed}",
        f"importance samples: {report.n_is}   mc samples: {report.n_mc}",
        "",
    ]
    if report.joint_ll is not None:
        lines.append(f"joint log-likelihood: {report.joint_ll:.3f}")
    for title, table in (("conditional log-likelihood", report.cond_ll),
                         ("coherence", report.coherence),
                         ("fid", report.fid)):
        if table:
            lines.append(f"{title} (target|source):")
            for key in sorted(table):
                lines.append(f"  {key}: {table[key]:.4f}")
    if report.vi_bound_violation_rate is not None:
        lines.append(f"vi bound violation rate: {report.vi_bound_violation_rate:.4f}")
    if report.fid:
        lines.append(f"fid feature extractor: {report.feature_extractor}")
    return "\n".join(lines) + "\n"


def _plot_loss_curves(dirs: dict[str, Path], out_dir: Path) -> list[Path]:
    created = []
    for stage in ("joint", "posteriors"):
        curve_path = dirs[stage] / "loss_curve.arrays"
        if not curve_path.exists():
            continue
        loss = arrayio.load_arrays(curve_path)["loss"]
        if loss.size == 0:
            continue
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(np.arange(1, loss.size + 1), loss)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.set_title(f"{stage} training loss")
        fig.tight_layout()
        path = out_dir / f"loss_{stage}.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        created.append(path)
    return created


def _plot_latents(dirs: dict[str, Path], out_dir: Path) -> list[Path]:
    latents_path = dirs["eval"] / "latents.arrays"
    if not latents_path.exists():
        return []
    arrays = arrayio.load_arrays(latents_path)
    mean = arrays["mean"]
    if mean.shape[1] != 2:
        note = out_dir / "latent_scatter.txt"
        note.write_text(f"latent space is {mean.shape[1]}-dimensional; scatter skipped\n")
        return [note]
    fig, ax = plt.subplots(figsize=(5, 5))
    labels = arrays.get("labels")
    sizes = arrays.get("meta_square_size")
    if labels is not None and sizes is not None:
        for lab in np.unique(labels):
            mask = labels == lab
            s = sizes[mask].astype(float)
            intensity = 0.25 + 0.75 * (s - s.min()) / max(s.max() - s.min(), 1)
            base = plt.get_cmap("coolwarm")(0.9 if lab % 2 else 0.1)
            colors = np.tile(base, (mask.sum(), 1))
            colors[:, 3] = intensity
            ax.scatter(mean[mask, 0], mean[mask, 1], c=colors, s=12, label=f"label {lab}")
        ax.legend(loc="best", fontsize=8)
    elif labels is not None:
        sc = ax.scatter(mean[:, 0], mean[:, 1], c=labels, cmap="coolwarm", s=12)
        fig.colorbar(sc, ax=ax, label="label")
    else:
        ax.scatter(mean[:, 0], mean[:, 1], s=12)
    ax.set_xlabel("z[0]")
    ax.set_ylabel("z[1]")
    ax.set_title("joint-encoder means")
    fig.tight_layout()
    path = out_dir / "latent_scatter.png"
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return [path]


def _load_models(run_dir: Path, dirs: dict[str, Path]):
    cfg = load_config(run_dir / "config.txt")
    joint = checkpoints.load_joint(dirs["joint"])
    dcca = None
    if cfg.variant == "jnf_dcca" and (dirs["dcca"] / "manifest.txt").exists():
        dcca = checkpoints.load_dcca(dirs["dcca"])
    posteriors = checkpoints.load_posteriors(dirs["posteriors"], dcca=dcca)
    eval_set = load_dataset(dirs["dataset"] / "eval")
    return cfg, joint, posteriors, eval_set


def _plot_posterior_density(run_dir: Path, dirs: dict[str, Path], out_dir: Path) -> list[Path]:
    if not (dirs["posteriors"] / "manifest.txt").exists():
        return []
    cfg, joint, posteriors, eval_set = _load_models(run_dir, dirs)
    if joint.latent_dim != 2:
        note = out_dir / "posterior_density.txt"
        note.write_text("density heatmaps need a 2-dimensional latent space; skipped\n")
        return [note]
    grid = np.linspace(-4.0, 4.0, 120)
    xx, yy = np.meshgrid(grid, grid, indexing="xy")
    pts = as_tensor(np.stack([xx.ravel(), yy.ravel()], axis=1))
    created = []
    for i in range(eval_set.n_modalities):
        x0 = eval_set.modalities[i][0]
        with torch.no_grad():
            logq = posteriors.log_density(i, pts, x0)
        fig, ax = plt.subplots(figsize=(5, 4.4))
        im = ax.imshow(
            np.exp(logq).reshape(xx.shape),
            origin="lower",
            extent=(grid[0], grid[-1], grid[0], grid[-1]),
            cmap="viridis",
            aspect="auto",
        )
        fig.colorbar(im, ax=ax)
        ax.set_title(f"posterior density, modality {i}")
        fig.tight_layout()
        path = out_dir / f"posterior_density_{i}.png"
        fig.savefig(path, dpi=110)
        plt.close(fig)
        created.append(path)
    return created


def _plot_generation_grids(
    run_dir: Path, dirs: dict[str, Path], out_dir: Path, n_cols: int = 8, n_rows: int = 4
) -> list[Path]:
    if not (dirs["posteriors"] / "manifest.txt").exists():
        return []
    cfg, joint, posteriors, eval_set = _load_models(run_dir, dirs)
    created = []
    m = eval_set.n_modalities
    for src in range(m):
        for tgt in range(m):
            if src == tgt or len(eval_set.specs[tgt].shape) != 2 or len(eval_set.specs[src].shape) != 2:
                continue
            cols = min(n_cols, len(eval_set))
            sources = eval_set.modalities[src][:cols]
            cond = posteriors.conditioning_for(src, as_tensor(sources))
            stack = posteriors.stacks_[src]
            with torch.no_grad():
                z = stack.sample(cond, n_rows, generator=new_generator(1234 + src))
                params = joint.model_.decode(z.reshape(-1, stack.latent_dim))[tgt]
            gen = params.reshape(cols, n_rows, *eval_set.specs[tgt].shape).numpy()
            fig, axes = plt.subplots(
                n_rows + 1, cols, figsize=(1.1 * cols, 1.1 * (n_rows + 1)), squeeze=False
            )
            for c in range(cols):
                axes[0, c].imshow(sources[c], cmap="gray", vmin=0, vmax=1)
                for r in range(n_rows):
                    axes[r + 1, c].imshow(gen[c, r], cmap="gray", vmin=0, vmax=1)
            for ax in axes.ravel():
                ax.set_xticks([])
                ax.set_yticks([])
            axes[0, 0].set_ylabel("source", fontsize=8)
            fig.suptitle(f"modality {src} -> modality {tgt}")
            fig.tight_layout()
            path = out_dir / f"generation_{src}_to_{tgt}.png"
            fig.savefig(path, dpi=110)
            plt.close(fig)
            created.append(path)
    return created
