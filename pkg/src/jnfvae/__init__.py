"""Multimodal joint VAEs with flow posteriors, DCCA conditioning and
product-of-experts inference."""

from .config import ExperimentConfig, config_hash, load_config
from .datasets import (
    ModalitySpec,
    MultimodalDataset,
    ToyConfig,
    batch_iterator,
    generate_toy_dataset,
    load_dataset,
    pair_by_label,
    save_dataset,
)
from .dcca import DccaEmbedding, dcca_loss, select_embedding_dim, total_correlation
from .evaluation import (
    EvalReport,
    ModalityClassifier,
    coherence,
    estimate_cond_ll,
    estimate_joint_ll,
    fid,
    fid_from_moments,
    vi_bound_check,
)
from .flows import FlowStack, MadeBlock, UnimodalPosteriors, distillation_loss
from .joint import (
    DiagGaussian,
    JointVAE,
    elbo_terms,
    kl_diag_gaussians,
    train_jmvae_onestep,
)
from .likelihoods import log_likelihood
from .pipeline import RunRecord, ablation_sweep, run_pipeline
from .poe import (
    FlowExpert,
    GaussianExpert,
    HmcConfig,
    HmcDiagnostics,
    PoeTarget,
    conditional_generate_subset,
    hmc_sample,
    leapfrog,
)
from .report import render_report

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "config_hash",
    "load_config",
    "ModalitySpec",
    "MultimodalDataset",
    "ToyConfig",
    "batch_iterator",
    "generate_toy_dataset",
    "load_dataset",
    "pair_by_label",
    "save_dataset",
    "DccaEmbedding",
    "dcca_loss",
    "select_embedding_dim",
    "total_correlation",
    "EvalReport",
    "ModalityClassifier",
    "coherence",
    "estimate_cond_ll",
    "estimate_joint_ll",
    "fid",
    "fid_from_moments",
    "vi_bound_check",
    "FlowStack",
    "MadeBlock",
    "UnimodalPosteriors",
    "distillation_loss",
    "DiagGaussian",
    "JointVAE",
    "elbo_terms",
    "kl_diag_gaussians",
    "train_jmvae_onestep",
    "log_likelihood",
    "RunRecord",
    "ablation_sweep",
    "run_pipeline",
    "FlowExpert",
    "GaussianExpert",
    "HmcConfig",
    "HmcDiagnostics",
    "PoeTarget",
    "conditional_generate_subset",
    "hmc_sample",
    "leapfrog",
    "render_report",
]
