"""Staged experiment pipeline with resumable checkpoints.

Stage order: dataset -> joint -> dcca (variant-dependent) ->
classifiers -> posteriors -> eval. Each stage writes its outputs plus a
DONE marker containing the hash of the config fields it depends on;
reruns with a matching marker load instead of recompute. Later stages
never rewrite earlier checkpoints.
"""

from __future__ import annotations

import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoints
from .config import ExperimentConfig, config_hash, config_to_text, stage_hash
from .datasets import (
    MultimodalDataset,
    ToyConfig,
    generate_toy_dataset,
    load_dataset,
    save_dataset,
)
from .dcca import DccaEmbedding
from .evaluation import (
    EvalReport,
    ModalityClassifier,
    coherence,
    estimate_cond_ll,
    estimate_joint_ll,
    fid,
    poe_sampler,
    posterior_sampler,
    vi_bound_check,
)
from .flows import DCCA_EMBEDDING, RAW_DATA, UnimodalPosteriors
from .likelihoods import likelihood_sample
from .joint import JointVAE, train_jmvae_onestep
from .poe import FlowExpert, HmcConfig, PoeTarget
from .validation import StageFailure, as_tensor, derive_seed, new_generator

STAGES = ("dataset", "joint", "dcca", "classifiers", "posteriors", "eval")


@dataclass
class RunRecord:
    """What a pipeline run produced and where it lives."""

    run_dir: Path
    config_hash: str
    stage_seconds: dict[str, float] = field(default_factory=dict)
    stages_loaded: list[str] = field(default_factory=list)
    report: EvalReport | None = None
    loss_curves: dict[str, list[float]] = field(default_factory=dict)


def _marker_path(stage_dir: Path) -> Path:
    return stage_dir / "DONE"


def _stage_complete(stage_dir: Path, expected_hash: str) -> bool:
    marker = _marker_path(stage_dir)
    return marker.exists() and marker.read_text().strip() == expected_hash


def _mark_done(stage_dir: Path, stage_hash_value: str) -> None:
    _marker_path(stage_dir).write_text(stage_hash_value + "\n")


def stage_dirs(run_dir: Path) -> dict[str, Path]:
    return {
        "dataset": run_dir / "dataset",
        "joint": run_dir / "checkpoints" / "joint",
        "dcca": run_dir / "checkpoints" / "dcca",
        "classifiers": run_dir / "checkpoints" / "classifiers",
        "posteriors": run_dir / "checkpoints" / "posteriors",
        "eval": run_dir / "metrics",
    }


def _build_dataset(cfg: ExperimentConfig) -> tuple[MultimodalDataset, MultimodalDataset]:
    ds = cfg.dataset
    if ds.kind == "toy":
        toy = ToyConfig(
            image_side=ds.image_side,
            size_min=ds.size_min,
            size_max=ds.size_max,
            fill_probability=ds.fill_probability,
            n_samples=ds.n_samples + ds.n_eval,
            seed=derive_seed(cfg.seed, "toy-data"),
            shared_size_bit=ds.shared_size_bit,
        )
        full = generate_toy_dataset(toy)
        return full.split(ds.n_samples)
    full = load_dataset(ds.path)
    n_eval = min(ds.n_eval, max(1, len(full) // 5))
    return full.split(len(full) - n_eval)


def _hmc_config(cfg: ExperimentConfig, seed: int) -> HmcConfig:
    return HmcConfig(
        step_size=cfg.hmc.eps,
        leapfrog_steps=cfg.hmc.steps,
        n_chains=cfg.hmc.chains,
        burn_in=cfg.hmc.burn_in,
        samples_per_chain=cfg.hmc.samples_per_chain,
        step_jitter=cfg.hmc.step_jitter,
        adapt_step_size=cfg.hmc.adapt_step_size,
        seed=seed,
    )


class Pipeline:
    """Runs the staged experiment in a run directory."""

    def __init__(self, cfg: ExperimentConfig, run_dir: str | Path):
        cfg.validate()
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.dirs = stage_dirs(self.run_dir)
        self.record = RunRecord(run_dir=self.run_dir, config_hash=config_hash(cfg))
        self.train: MultimodalDataset | None = None
        self.eval_set: MultimodalDataset | None = None
        self.joint: JointVAE | None = None
        self.dcca: DccaEmbedding | None = None
        self.classifiers: list[ModalityClassifier] | None = None
        self.posteriors: UnimodalPosteriors | None = None

    def run(self, until: str = "eval") -> RunRecord:
        torch.set_num_threads(1)  # keeps reruns bit-identical
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "config.txt").write_text(config_to_text(self.cfg))
        for stage in STAGES:
            if self._applicable(stage):
                started = time.time()
                try:
                    self._run_stage(stage)
                except StageFailure:
                    raise
                except Exception as exc:
                    raise StageFailure(stage, exc) from exc
                self.record.stage_seconds[stage] = time.time() - started
            if stage == until:
                break
        return self.record

    def _applicable(self, stage: str) -> bool:
        if stage == "dcca":
            return self.cfg.variant == "jnf_dcca"
        return True

    def _run_stage(self, stage: str) -> None:
        stage_dir = self.dirs[stage]
        expected = stage_hash(self.cfg, stage)
        if _stage_complete(stage_dir, expected):
            self._load_stage(stage)
            self.record.stages_loaded.append(stage)
            return
        stage_dir.mkdir(parents=True, exist_ok=True)
        getattr(self, f"_compute_{stage}")(stage_dir)
        _mark_done(stage_dir, expected)

    def _load_stage(self, stage: str) -> None:
        stage_dir = self.dirs[stage]
        if stage == "dataset":
            self.train = load_dataset(stage_dir / "train")
            self.eval_set = load_dataset(stage_dir / "eval")
        elif stage == "joint":
            self.joint = checkpoints.load_joint(stage_dir)
            if hasattr(self.joint, "loss_curve_"):
                self.record.loss_curves["joint"] = self.joint.loss_curve_
        elif stage == "dcca":
            self.dcca = checkpoints.load_dcca(stage_dir)
            self._apply_d_keep()
        elif stage == "classifiers":
            self.classifiers = [
                checkpoints.load_classifier(stage_dir / f"modality_{i}")
                for i in range(self.train.n_modalities)
            ]
        elif stage == "posteriors":
            self.posteriors = checkpoints.load_posteriors(stage_dir, dcca=self.dcca)
            if hasattr(self.posteriors, "loss_curve_"):
                self.record.loss_curves["posteriors"] = self.posteriors.loss_curve_
        elif stage == "eval":
            self.record.report = EvalReport.from_text((stage_dir / "report.txt").read_text())

    # ---- stage implementations -------------------------------------

    def _compute_dataset(self, stage_dir: Path) -> None:
        self.train, self.eval_set = _build_dataset(self.cfg)
        save_dataset(self.train, stage_dir / "train")
        save_dataset(self.eval_set, stage_dir / "eval")

    def _compute_joint(self, stage_dir: Path) -> None:
        cfg = self.cfg
        weights = cfg.reconstruction_weights_list(self.train.n_modalities)
        hidden = (cfg.training.encoder_hidden,) * 2
        dec_hidden = (cfg.training.decoder_hidden,) * 2
        self.joint = JointVAE(
            latent_dim=cfg.latent_dim,
            encoder_hidden=hidden,
            decoder_hidden=dec_hidden,
            reconstruction_weights=weights,
            epochs=cfg.training.epochs_step1,
            lr=cfg.training.lr,
            batch_size=cfg.training.batch_size,
            seed=derive_seed(cfg.seed, "stage-joint"),
        )
        if cfg.variant == "jmvae_onestep":
            # the combined training produces both components, so this
            # stage writes the posteriors checkpoint too and the later
            # posteriors stage just resumes it
            posteriors = self._make_posteriors(n_blocks=0)
            warmup = cfg.training.warmup_epochs or cfg.training.epochs_step1 // 2
            curve = train_jmvae_onestep(
                self.joint,
                posteriors,
                self.train,
                alpha=cfg.training.alpha,
                warmup_epochs=warmup,
                epochs=cfg.training.epochs_step1,
                lr=cfg.training.lr,
                batch_size=cfg.training.batch_size,
                seed=derive_seed(cfg.seed, "stage-onestep"),
            )
            self.joint.loss_curve_ = curve["loss"]
            posteriors.loss_curve_ = curve["match"]
            post_dir = self.dirs["posteriors"]
            post_dir.mkdir(parents=True, exist_ok=True)
            checkpoints.save_posteriors(posteriors, post_dir)
            _mark_done(post_dir, stage_hash(cfg, "posteriors"))
        else:
            self.joint.fit(self.train)
        self.record.loss_curves["joint"] = self.joint.loss_curve_
        checkpoints.save_joint(self.joint, stage_dir)

    def _compute_dcca(self, stage_dir: Path) -> None:
        cfg = self.cfg
        self.dcca = DccaEmbedding(
            output_dim=cfg.dcca.output_dim,
            d_keep=cfg.dcca.d_keep or None,
            hidden=(cfg.dcca.hidden,) * 2,
            reg=cfg.dcca.regularizer,
            epochs=cfg.dcca.epochs,
            lr=cfg.dcca.lr,
            batch_size=cfg.dcca.batch_size,
            seed=derive_seed(cfg.seed, "stage-dcca"),
        )
        self.dcca.fit(self.train)
        checkpoints.save_dcca(self.dcca, stage_dir)
        self._apply_d_keep()

    def _apply_d_keep(self) -> None:
        # the checkpoint stores the dim selected at fit time; a sweep
        # config may override it without retraining
        if self.cfg.dcca.d_keep:
            self.dcca.embedding_dim_ = min(self.cfg.dcca.d_keep, self.dcca.output_dim)

    def _compute_classifiers(self, stage_dir: Path) -> None:
        if self.train.labels is None:
            raise StageFailure("classifiers", "dataset has no labels")
        cfg = self.cfg
        self.classifiers = []
        for i in range(self.train.n_modalities):
            clf = ModalityClassifier(
                hidden=(cfg.eval.classifier_hidden,),
                epochs=cfg.eval.classifier_epochs,
                accuracy_floor=cfg.eval.classifier_floor,
                seed=derive_seed(cfg.seed, f"classifier-{i}"),
            )
            clf.fit(self.train.modalities[i], self.train.labels)
            checkpoints.save_classifier(clf, stage_dir / f"modality_{i}")
            self.classifiers.append(clf)

    def _make_posteriors(self, n_blocks: int | None = None) -> UnimodalPosteriors:
        cfg = self.cfg
        mode = DCCA_EMBEDDING if cfg.variant == "jnf_dcca" else RAW_DATA
        return UnimodalPosteriors(
            n_blocks=cfg.n_flow_blocks if n_blocks is None else n_blocks,
            made_hidden=(cfg.flow.hidden_units,) * cfg.flow.hidden_layers,
            base_hidden=(cfg.flow.base_hidden,) * 2,
            conditional=cfg.flow.conditional,
            conditioning_mode=mode,
            scale_clamp=cfg.flow.scale_clamp,
            epochs=cfg.training.epochs_step2,
            lr=cfg.training.lr,
            batch_size=cfg.training.batch_size,
            seed=derive_seed(cfg.seed, "stage-posteriors"),
        )

    def _compute_posteriors(self, stage_dir: Path) -> None:
        if self.cfg.variant == "jmvae_onestep":
            # written by the joint stage; only reachable if its marker
            # was removed while the joint checkpoint survives
            raise StageFailure(
                "posteriors",
                "the one-stage variant trains posteriors with the joint model; "
                "clear the joint checkpoint to retrain",
            )
        self.posteriors = self._make_posteriors()
        self.posteriors.fit(self.train, self.joint, dcca=self.dcca)
        self.record.loss_curves["posteriors"] = self.posteriors.loss_curve_
        checkpoints.save_posteriors(self.posteriors, stage_dir)

    def cross_modal_generator(self, src: int, tgt: int, decode: str | None = None):
        """Cross-modal generator for coherence/FID, one draw per source row.

        Returns likelihood means by default; decode="sample" draws from
        the observation distribution instead.
        """
        joint_model = self.joint.model_
        stack = self.posteriors.stacks_[src]
        decode = decode or self.cfg.eval.decode_mode

        def generate(source_batch, draw_index: int, seed: int) -> np.ndarray:
            cond = self.posteriors.conditioning_for(src, as_tensor(source_batch))
            with torch.no_grad():
                z = stack.sample(cond, 1, generator=new_generator(seed))
                z = z.reshape(-1, stack.latent_dim)
                params = joint_model.decode(z)[tgt]
                if decode == "sample":
                    params = likelihood_sample(
                        params, joint_model.families[tgt], generator=new_generator(seed + 1)
                    )
                elif decode != "mean":
                    raise ValueError(f"unknown decode mode {decode!r}")
            return params.numpy()

        return generate

    def subset_generator(self, subset: tuple[int, ...], tgt: int):
        """Product-of-experts generator conditioned on several modalities."""
        joint_model = self.joint.model_

        def generate(source_batches, draw_index: int, seed: int) -> np.ndarray:
            outputs = []
            for row in range(len(source_batches[0])):
                experts = []
                for k, src in enumerate(subset):
                    cond = self.posteriors.conditioning_for(src, as_tensor(source_batches[k][row]))
                    experts.append(FlowExpert(self.posteriors.stacks_[src], cond))
                target = PoeTarget(experts, self.joint.latent_dim)
                sampler = poe_sampler(target, _hmc_config(self.cfg, derive_seed(seed, f"row{row}")))
                z = as_tensor(sampler(1, derive_seed(seed, f"draw{row}")))
                with torch.no_grad():
                    outputs.append(joint_model.decode(z)[tgt].numpy()[0])
            return np.stack(outputs)

        return generate

    def _compute_eval(self, stage_dir: Path) -> None:
        cfg = self.cfg
        report = EvalReport(
            model_id=f"{cfg.variant}-{self.record.config_hash}",
            dataset_id=cfg.dataset.kind,
            seed=cfg.seed,
            n_is=cfg.eval.n_is,
            n_mc=cfg.eval.n_mc,
            feature_extractor="coherence-classifier-penultimate",
        )
        m = self.eval_set.n_modalities
        joint_model = self.joint.model_
        eval_xs = [as_tensor(x) for x in self.eval_set.modalities]
        n_ll = min(cfg.eval.n_eval_ll, len(self.eval_set))

        values = [
            estimate_joint_ll(
                joint_model,
                [x[k] for x in eval_xs],
                n_is=cfg.eval.n_is,
                seed=derive_seed(cfg.seed, f"jll-{k}"),
            )[0]
            for k in range(n_ll)
        ]
        report.joint_ll = float(np.mean(values))

        for tgt in range(m):
            for src in range(m):
                if src == tgt:
                    continue
                vals = []
                for k in range(n_ll):
                    cond = self.posteriors.conditioning_for(src, eval_xs[src][k])
                    sampler = posterior_sampler(self.posteriors.stacks_[src], cond)
                    vals.append(
                        estimate_cond_ll(
                            joint_model,
                            sampler,
                            tgt,
                            eval_xs[tgt][k],
                            n_mc=cfg.eval.n_mc,
                            seed=derive_seed(cfg.seed, f"cll-{src}-{tgt}-{k}"),
                        )[0]
                    )
                report.cond_ll[f"{tgt}|{src}"] = float(np.mean(vals))

        if m >= 3 and cfg.eval.subset_metrics:
            for tgt in range(m):
                subset = tuple(i for i in range(m) if i != tgt)
                vals = []
                for k in range(min(n_ll, cfg.eval.n_subset_eval)):
                    experts = [
                        FlowExpert(
                            self.posteriors.stacks_[src],
                            self.posteriors.conditioning_for(src, eval_xs[src][k]),
                        )
                        for src in subset
                    ]
                    target = PoeTarget(experts, self.joint.latent_dim)
                    sampler = poe_sampler(
                        target, _hmc_config(cfg, derive_seed(cfg.seed, f"scll-{tgt}-{k}"))
                    )
                    vals.append(
                        estimate_cond_ll(
                            joint_model, sampler, tgt, eval_xs[tgt][k],
                            n_mc=cfg.eval.n_mc,
                            seed=derive_seed(cfg.seed, f"scll-mc-{tgt}-{k}"),
                        )[0]
                    )
                report.cond_ll[f"{tgt}|rest"] = float(np.mean(vals))

        labels = self.eval_set.labels
        real_feats = self._real_feature_cache(stage_dir) if cfg.eval.fid_enabled else {}
        for tgt in range(m):
            self.classifiers[tgt].require_coherence_ready()
            for src in range(m):
                if src == tgt:
                    continue
                gen_fn = self.cross_modal_generator(src, tgt)
                report.coherence[f"{tgt}|{src}"] = coherence(
                    gen_fn,
                    self.classifiers[tgt],
                    self.eval_set.modalities[src],
                    labels,
                    n_per_sample=cfg.eval.coherence_samples,
                    seed=derive_seed(cfg.seed, f"coh-{src}-{tgt}"),
                )
                if tgt in real_feats:
                    generated = gen_fn(
                        self.eval_set.modalities[src], 0, derive_seed(cfg.seed, f"fid-{src}-{tgt}")
                    )
                    feats_gen = self.classifiers[tgt].features(generated)
                    report.fid[f"{tgt}|{src}"] = fid(real_feats[tgt], feats_gen)
        if m >= 3 and cfg.eval.subset_metrics and labels is not None:
            n_sub = min(cfg.eval.n_subset_coherence, len(self.eval_set))
            for tgt in range(m):
                subset = tuple(i for i in range(m) if i != tgt)
                gen_fn = self.subset_generator(subset, tgt)
                sources = [self.eval_set.modalities[src][:n_sub] for src in subset]
                generated = gen_fn(sources, 0, derive_seed(cfg.seed, f"scoh-{tgt}"))
                pred = self.classifiers[tgt].predict(generated)
                report.coherence[f"{tgt}|rest"] = float((pred == labels[:n_sub]).mean())

        if m == 2 and cfg.eval.n_vi_pairs > 0:
            n_pairs = min(cfg.eval.n_vi_pairs, len(self.eval_set))
            conds_full = [
                self.posteriors.conditioning_for(i, eval_xs[i][:n_pairs]) for i in range(2)
            ]
            satisfied = 0
            for k in range(n_pairs):
                _, _, ok, _ = vi_bound_check(
                    joint_model,
                    self.posteriors.stacks_,
                    [conds_full[0][k], conds_full[1][k]],
                    [eval_xs[0][k], eval_xs[1][k]],
                    n_mc=cfg.eval.n_mc,
                    seed=derive_seed(cfg.seed, f"vi-{k}"),
                )
                satisfied += int(ok)
            report.vi_bound_violation_rate = 1.0 - satisfied / n_pairs

        report.validate()
        (stage_dir / "report.txt").write_text(report.to_text())
        self._save_latents(stage_dir)
        self.record.report = report

    def _real_feature_cache(self, stage_dir: Path) -> dict[int, np.ndarray]:
        """Eval-split features per modality, cached by extractor hash.

        Only modalities whose eval split exceeds the feature dimension
        are included (a sample covariance needs that many rows).
        """
        import hashlib

        from . import arrayio

        cache_dir = stage_dir / "feature_cache"
        cache_dir.mkdir(parents=True, exist_ok=True)
        out: dict[int, np.ndarray] = {}
        for i, clf in enumerate(self.classifiers):
            if len(self.eval_set) <= clf.net_.feature_dim:
                continue
            state = clf.net_.state_dict()
            digest = hashlib.sha256()
            for key in sorted(state):
                digest.update(key.encode())
                digest.update(state[key].numpy().tobytes())
            path = cache_dir / f"modality_{i}_{digest.hexdigest()[:16]}.arrays"
            if path.exists():
                out[i] = arrayio.load_arrays(path)["features"]
            else:
                out[i] = clf.features(self.eval_set.modalities[i])
                arrayio.save_arrays(path, {"features": out[i]})
        return out

    def _save_latents(self, stage_dir: Path) -> None:
        """Store joint-encoder means of the eval split for plots."""
        from . import arrayio

        with torch.no_grad():
            q = self.joint.model_.encode([as_tensor(x) for x in self.eval_set.modalities])
        arrays = {"mean": q.mean.numpy(), "log_var": q.log_var.numpy()}
        if self.eval_set.labels is not None:
            arrays["labels"] = self.eval_set.labels
        for key, val in self.eval_set.meta.items():
            arrays[f"meta_{key}"] = val
        arrayio.save_arrays(stage_dir / "latents.arrays", arrays)


def run_pipeline(cfg: ExperimentConfig, run_dir: str | Path, until: str = "eval") -> RunRecord:
    """Execute (or resume) all pipeline stages in order."""
    return Pipeline(cfg, run_dir).run(until=until)


def ablation_sweep(
    base_cfg: ExperimentConfig,
    axis: str,
    values,
    run_root: str | Path,
) -> list[tuple[float, EvalReport]]:
    """One pipeline run per axis value, reusing stages the axis leaves alone.

    Supported axes: "flow_depth" (number of flow blocks) and "dcca_dim"
    (embedding coordinates kept). Both leave the dataset, joint model
    and classifiers untouched; "flow_depth" also reuses the dcca stage.
    Emits a value-vs-metrics table under the run root.
    """
    if axis not in ("flow_depth", "dcca_dim"):
        raise ValueError(f"unknown sweep axis {axis!r}")
    run_root = Path(run_root)
    run_root.mkdir(parents=True, exist_ok=True)
    results: list[tuple[float, EvalReport]] = []
    base_dir: Path | None = None
    base_for_reuse: ExperimentConfig | None = None
    for value in values:
        cfg = config_like(base_cfg)
        if axis == "flow_depth":
            cfg.flow.n_blocks = int(value)
        else:
            cfg.dcca.d_keep = int(value)
        run_dir = run_root / f"{axis}_{value}"
        if base_dir is not None:
            _reuse_matching_stages(base_for_reuse, base_dir, cfg, run_dir)
        record = run_pipeline(cfg, run_dir)
        if base_dir is None:
            base_dir, base_for_reuse = run_dir, cfg
        results.append((float(value), record.report))
    _write_sweep_table(run_root, axis, results)
    return results


def config_like(cfg: ExperimentConfig) -> ExperimentConfig:
    from .config import config_from_text

    return config_from_text(config_to_text(cfg))


def _reuse_matching_stages(
    base_cfg: ExperimentConfig, base_dir: Path, cfg: ExperimentConfig, run_dir: Path
) -> None:
    dirs_from = stage_dirs(base_dir)
    dirs_to = stage_dirs(run_dir)
    for stage in STAGES:
        if stage == "eval":
            continue
        if stage_hash(base_cfg, stage) != stage_hash(cfg, stage):
            continue
        src, dst = dirs_from[stage], dirs_to[stage]
        if src.exists() and _marker_path(src).exists() and not dst.exists():
            dst.parent.mkdir(parents=True, exist_ok=True)
            shutil.copytree(src, dst)


def _write_sweep_table(run_root: Path, axis: str, results) -> None:
    lines = [f"# sweep over {axis}"]
    keys = sorted({k for _, rep in results for k in rep.coherence})
    header = [axis] + [f"coherence[{k}]" for k in keys] + [f"fid[{k}]" for k in keys]
    lines.append("\t".join(header))
    for value, rep in results:
        row = [f"{value:g}"]
        row += [f"{rep.coherence.get(k, float('nan')):.4f}" for k in keys]
        row += [f"{rep.fid.get(k, float('nan')):.4f}" for k in keys]
        lines.append("\t".join(row))
    (run_root / f"sweep_{axis}.txt").write_text("\n".join(lines) + "\n")
