"""Experiment configuration: typed sections, flat key=value files, hashing.

A config file is plain text with dotted keys (``flow.n_blocks=2``).
Every field that can affect results is part of the config hash, and
each pipeline stage keys its checkpoint on the hash of the fields it
actually depends on, so sweeps can reuse untouched stages.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .validation import ConfigError

VARIANTS = ("jmvae_gaussian", "jnf", "jnf_dcca", "jmvae_onestep")


@dataclass
class DatasetSection:
    kind: str = "toy"  # "toy" generates shapes; "disk" ingests a directory
    path: str = ""
    n_samples: int = 4000
    n_eval: int = 1000
    image_side: int = 32
    size_min: int = 3
    size_max: int = 13
    fill_probability: float = 0.5
    shared_size_bit: bool = False


@dataclass
class FlowSection:
    n_blocks: int = 2
    hidden_layers: int = 3
    hidden_units: int = 128
    conditional: bool = True
    scale_clamp: float = 5.0
    base_hidden: int = 256


@dataclass
class DccaSection:
    output_dim: int = 16
    d_keep: int = 0  # 0 selects from the spectrum
    regularizer: float = 1e-3
    hidden: int = 256
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 800


@dataclass
class TrainingSection:
    epochs_step1: int = 100
    epochs_step2: int = 100
    lr: float = 1e-3
    batch_size: int = 128
    encoder_hidden: int = 256
    decoder_hidden: int = 256
    reconstruction_weights: str = ""  # comma-separated, empty = all ones
    alpha: float = 0.1
    warmup_epochs: int = 0  # 0 = half of epochs_step1 (one-step variant only)


@dataclass
class HmcSection:
    eps: float = 0.05
    steps: int = 10
    chains: int = 8
    burn_in: int = 200
    samples_per_chain: int = 250
    step_jitter: float = 0.2
    adapt_step_size: bool = True


@dataclass
class EvalSection:
    n_is: int = 1000
    n_mc: int = 1000
    coherence_samples: int = 1
    n_eval_ll: int = 50
    n_vi_pairs: int = 0
    classifier_epochs: int = 15
    classifier_floor: float = 0.9
    classifier_hidden: int = 256
    fid_enabled: bool = True
    decode_mode: str = "mean"  # "sample" draws from the likelihood instead
    subset_metrics: bool = True  # m >= 3 only: condition on all-but-one
    n_subset_eval: int = 10
    n_subset_coherence: int = 100


@dataclass
class ExperimentConfig:
    variant: str = "jnf"
    latent_dim: int = 2
    seed: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    flow: FlowSection = field(default_factory=FlowSection)
    dcca: DccaSection = field(default_factory=DccaSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    hmc: HmcSection = field(default_factory=HmcSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        positive = {
            "training.epochs_step1": self.training.epochs_step1,
            "training.epochs_step2": self.training.epochs_step2,
            "training.batch_size": self.training.batch_size,
            "eval.n_is": self.eval.n_is,
            "eval.n_mc": self.eval.n_mc,
            "eval.coherence_samples": self.eval.coherence_samples,
            "hmc.chains": self.hmc.chains,
            "hmc.steps": self.hmc.steps,
            "dataset.n_samples": self.dataset.n_samples,
        }
        for name, value in positive.items():
            if value < 0 or (name not in ("training.epochs_step1", "training.epochs_step2") and value == 0):
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.training.alpha < 0:
            raise ConfigError("training.alpha must be >= 0")
        if self.variant == "jnf_dcca":
            if self.dcca.output_dim < 1:
                raise ConfigError("variant jnf_dcca requires dcca.output_dim >= 1")
        if self.dataset.kind not in ("toy", "disk"):
            raise ConfigError(f"unknown dataset kind {self.dataset.kind!r}")
        if self.dataset.kind == "disk" and not self.dataset.path:
            raise ConfigError("dataset.kind=disk requires dataset.path")
        if self.hmc.eps <= 0:
            raise ConfigError("hmc.eps must be positive")

    @property
    def n_flow_blocks(self) -> int:
        # the Gaussian-posterior variant is the zero-block reduction
        return 0 if self.variant == "jmvae_gaussian" else self.flow.n_blocks

    def reconstruction_weights_list(self, n_modalities: int) -> list[float]:
        raw = self.training.reconstruction_weights.strip()
        if not raw:
            return [1.0] * n_modalities
        weights = [float(w) for w in raw.split(",")]
        if len(weights) != n_modalities:
            raise ConfigError(
                f"reconstruction_weights has {len(weights)} entries for {n_modalities} modalities"
            )
        return weights


_SECTIONS = ("dataset", "flow", "dcca", "training", "hmc", "eval")


def _coerce(value: str, typ: type):
    if typ is bool:
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected boolean, got {value!r}")
    return typ(value)


def config_to_text(cfg: ExperimentConfig) -> str:
    lines = [
        f"variant={cfg.variant}",
        f"latent_dim={cfg.latent_dim}",
        f"seed={cfg.seed}",
    ]
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name}={getattr(obj, f.name)}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    field_types = {
        section: {f.name: f.type for f in dataclasses.fields(getattr(cfg, section))}
        for section in _SECTIONS
    }
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "variant":
            cfg.variant = value
        elif key == "latent_dim":
            cfg.latent_dim = int(value)
        elif key == "seed":
            cfg.seed = int(value)
        elif "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section {section!r}")
            types = field_types[section]
            if name not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            typ = types[name]
            if isinstance(typ, str):  # postponed annotations
                typ = {"int": int, "float": float, "str": str, "bool": bool}[typ]
            setattr(getattr(cfg, section), name, _coerce(value, typ))
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return cfg


def load_config(path: str | Path, overrides: list[str] | None = None) -> ExperimentConfig:
    text = Path(path).read_text()
    if overrides:
        text = text + "\n" + "\n".join(overrides)
    cfg = config_from_text(text)
    cfg.validate()
    return cfg


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(config_to_text(cfg).encode()).hexdigest()[:16]


# fields each stage depends on; used for checkpoint reuse across sweeps
_STAGE_KEYS = {
    "dataset": ("seed", "dataset"),
    "joint": ("seed", "latent_dim", "dataset", "training"),
    "classifiers": ("seed", "dataset", "eval"),
    "dcca": ("seed", "dataset", "dcca"),
    "posteriors": ("seed", "latent_dim", "dataset", "training", "flow", "dcca", "variant"),
    "eval": ("seed", "latent_dim", "dataset", "training", "flow", "dcca", "variant", "hmc", "eval"),
}

# the dcca stage trains at output_dim; the kept-dimension truncation is
# applied downstream, so sweeps over it can reuse the trained encoders
_STAGE_FIELD_EXCLUDES = {("dcca", "dcca"): ("d_keep",)}


def stage_hash(cfg: ExperimentConfig, stage: str) -> str:
    keys = _STAGE_KEYS[stage]
    chunks = []
    for key in keys:
        if key in ("seed", "latent_dim", "variant"):
            chunks.append(f"{key}={getattr(cfg, key)}")
        else:
            obj = getattr(cfg, key)
            excluded = _STAGE_FIELD_EXCLUDES.get((stage, key), ())
            for f in dataclasses.fields(obj):
                if f.name in excluded:
                    continue
                chunks.append(f"{key}.{f.name}={getattr(obj, f.name)}")
    return hashlib.sha256("\n".join(chunks).encode()).hexdigest()[:16]
