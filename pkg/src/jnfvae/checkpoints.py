"""Estimator checkpoints: parameter arrays plus a rebuild manifest.

Each component is one deterministic array container; the manifest holds
everything needed to reconstruct the estimator (architecture settings,
modality specs, training metadata), so density evaluation reproduces
bit-exactly across processes.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from . import arrayio
from .datasets import ModalitySpec
from .dcca import DccaEmbedding
from .evaluation import ModalityClassifier
from .flows import UnimodalPosteriors
from .joint import JointVAE
from .networks import MlpClassifier
from .validation import DTYPE


def _state_to_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _load_state(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {k: torch.as_tensor(v).to(DTYPE) for k, v in arrays.items()}
    module.load_state_dict(state)


def _specs_to_manifest(specs: list[ModalitySpec]) -> dict[str, str]:
    out = {"n_modalities": str(len(specs))}
    for i, spec in enumerate(specs):
        out[f"modality_{i}.name"] = spec.name
        out[f"modality_{i}.shape"] = ",".join(str(s) for s in spec.shape)
        out[f"modality_{i}.family"] = spec.likelihood_family
    return out


def _specs_from_manifest(man: dict[str, str]) -> list[ModalitySpec]:
    n = int(man["n_modalities"])
    return [
        ModalitySpec(
            man[f"modality_{i}.name"],
            tuple(int(s) for s in man[f"modality_{i}.shape"].split(",")),
            man[f"modality_{i}.family"],
        )
        for i in range(n)
    ]


def _ints(raw: str) -> tuple[int, ...]:
    return tuple(int(s) for s in raw.split(",") if s != "")


class _SpecOnlyDataset:
    """Stub exposing just what estimator build() needs."""

    def __init__(self, specs: list[ModalitySpec]):
        self.specs = specs
        self.n_modalities = len(specs)


def save_joint(est: JointVAE, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    man = _specs_to_manifest(est.specs_)
    man.update(
        {
            "component": "joint",
            "latent_dim": str(est.latent_dim),
            "encoder_hidden": ",".join(str(h) for h in est.encoder_hidden),
            "decoder_hidden": ",".join(str(h) for h in est.decoder_hidden),
            "weights": ",".join(f"{w:.17g}" for w in est.weights_),
            "seed": str(est.seed),
            "epochs": str(est.epochs),
            "lr": f"{est.lr:.17g}",
            "batch_size": str(est.batch_size),
        }
    )
    arrayio.write_manifest(directory / "manifest.txt", man)
    arrayio.save_arrays(directory / "encoder.arrays", _state_to_arrays(est.model_.encoder))
    for i, dec in enumerate(est.model_.decoders):
        arrayio.save_arrays(directory / f"decoder_{i}.arrays", _state_to_arrays(dec))
    if hasattr(est, "loss_curve_"):
        arrayio.save_arrays(
            directory / "loss_curve.arrays", {"loss": np.asarray(est.loss_curve_)}
        )


def load_joint(directory: str | Path) -> JointVAE:
    directory = Path(directory)
    man = arrayio.read_manifest(directory / "manifest.txt")
    specs = _specs_from_manifest(man)
    est = JointVAE(
        latent_dim=int(man["latent_dim"]),
        encoder_hidden=_ints(man["encoder_hidden"]),
        decoder_hidden=_ints(man["decoder_hidden"]),
        epochs=int(man["epochs"]),
        lr=float(man["lr"]),
        batch_size=int(man["batch_size"]),
        seed=int(man["seed"]),
    )
    est.specs_ = specs
    est.weights_ = [float(w) for w in man["weights"].split(",")]
    est.model_ = est._build(_SpecOnlyDataset(specs))
    _load_state(est.model_.encoder, arrayio.load_arrays(directory / "encoder.arrays"))
    for i, dec in enumerate(est.model_.decoders):
        _load_state(dec, arrayio.load_arrays(directory / f"decoder_{i}.arrays"))
    curve_path = directory / "loss_curve.arrays"
    if curve_path.exists():
        est.loss_curve_ = arrayio.load_arrays(curve_path)["loss"].tolist()
    return est


def save_posteriors(est: UnimodalPosteriors, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    man = _specs_to_manifest(est.specs_)
    man.update(
        {
            "component": "posteriors",
            "n_blocks": str(est.n_blocks),
            "made_hidden": ",".join(str(h) for h in est.made_hidden),
            "base_hidden": ",".join(str(h) for h in est.base_hidden),
            "conditional": str(est.conditional),
            "conditioning_mode": est.conditioning_mode,
            "scale_clamp": f"{est.scale_clamp:.17g}",
            "latent_dim": str(est.stacks_[0].latent_dim),
            "seed": str(est.seed),
            "epochs": str(est.epochs),
            "lr": f"{est.lr:.17g}",
            "batch_size": str(est.batch_size),
        }
    )
    arrayio.write_manifest(directory / "manifest.txt", man)
    for i, stack in enumerate(est.stacks_):
        arrayio.save_arrays(directory / f"stack_{i}.arrays", _state_to_arrays(stack))
    if hasattr(est, "loss_curve_"):
        arrayio.save_arrays(
            directory / "loss_curve.arrays", {"loss": np.asarray(est.loss_curve_)}
        )


def load_posteriors(directory: str | Path, dcca: DccaEmbedding | None = None) -> UnimodalPosteriors:
    directory = Path(directory)
    man = arrayio.read_manifest(directory / "manifest.txt")
    specs = _specs_from_manifest(man)
    est = UnimodalPosteriors(
        n_blocks=int(man["n_blocks"]),
        made_hidden=_ints(man["made_hidden"]),
        base_hidden=_ints(man["base_hidden"]),
        conditional=man["conditional"] == "True",
        conditioning_mode=man["conditioning_mode"],
        scale_clamp=float(man["scale_clamp"]),
        epochs=int(man["epochs"]),
        lr=float(man["lr"]),
        batch_size=int(man["batch_size"]),
        seed=int(man["seed"]),
    )

    class _Joint:
        latent_dim = int(man["latent_dim"])

    est.build(_SpecOnlyDataset(specs), _Joint(), dcca=dcca)
    for i, stack in enumerate(est.stacks_):
        _load_state(stack, arrayio.load_arrays(directory / f"stack_{i}.arrays"))
    curve_path = directory / "loss_curve.arrays"
    if curve_path.exists():
        est.loss_curve_ = arrayio.load_arrays(curve_path)["loss"].tolist()
    return est


def save_dcca(est: DccaEmbedding, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    man = {
        "component": "dcca",
        "output_dim": str(est.output_dim),
        "d_keep": str(est.embedding_dim_),
        "hidden": ",".join(str(h) for h in est.hidden),
        "reg": f"{est.reg:.17g}",
        "epochs": str(est.epochs),
        "lr": f"{est.lr:.17g}",
        "batch_size": str(est.batch_size),
        "policy": est.policy,
        "seed": str(est.seed),
        "n_modalities": str(len(est.encoders_)),
        "input_dims": ",".join(str(enc[0].in_features) for enc in est.encoders_),
    }
    arrayio.write_manifest(directory / "manifest.txt", man)
    arrays: dict[str, np.ndarray] = {}
    for i, enc in enumerate(est.encoders_):
        for key, val in enc.state_dict().items():
            arrays[f"encoder_{i}.{key}"] = val.numpy()
        arrays[f"mean_{i}"] = est.means_[i].numpy()
        arrays[f"rotation_{i}"] = est.rotations_[i].numpy()
    for (i, j), spec in est.spectra_.items():
        arrays[f"spectrum_{i}_{j}"] = np.asarray(spec)
    arrayio.save_arrays(directory / "dcca.arrays", arrays)


def load_dcca(directory: str | Path) -> DccaEmbedding:
    directory = Path(directory)
    man = arrayio.read_manifest(directory / "manifest.txt")
    est = DccaEmbedding(
        output_dim=int(man["output_dim"]),
        hidden=_ints(man["hidden"]),
        reg=float(man["reg"]),
        epochs=int(man["epochs"]),
        lr=float(man["lr"]),
        batch_size=int(man["batch_size"]),
        policy=man["policy"],
        seed=int(man["seed"]),
    )
    arrays = arrayio.load_arrays(directory / "dcca.arrays")
    n = int(man["n_modalities"])
    input_dims = _ints(man["input_dims"])
    from .networks import mlp  # local import to avoid a cycle at module load

    est.encoders_ = [
        mlp([input_dims[i], *est.hidden, est.output_dim]).to(DTYPE) for i in range(n)
    ]
    for i, enc in enumerate(est.encoders_):
        prefix = f"encoder_{i}."
        state = {
            k[len(prefix) :]: torch.as_tensor(v).to(DTYPE)
            for k, v in arrays.items()
            if k.startswith(prefix)
        }
        enc.load_state_dict(state)
    est.means_ = [torch.as_tensor(arrays[f"mean_{i}"]).to(DTYPE) for i in range(n)]
    est.rotations_ = [torch.as_tensor(arrays[f"rotation_{i}"]).to(DTYPE) for i in range(n)]
    est.spectra_ = {}
    for key, val in arrays.items():
        if key.startswith("spectrum_"):
            _, i, j = key.split("_")
            est.spectra_[(int(i), int(j))] = val
    est.spectrum_ = est.spectra_[(0, 1)]
    est.embedding_dim_ = int(man["d_keep"])
    return est


def save_classifier(est: ModalityClassifier, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    man = {
        "component": "classifier",
        "hidden": ",".join(str(h) for h in est.hidden),
        "epochs": str(est.epochs),
        "lr": f"{est.lr:.17g}",
        "batch_size": str(est.batch_size),
        "holdout_fraction": f"{est.holdout_fraction:.17g}",
        "accuracy_floor": f"{est.accuracy_floor:.17g}",
        "seed": str(est.seed),
        "accuracy": f"{est.accuracy_:.17g}",
        "in_dim": str(est.net_.body[0].in_features),
        "n_classes": str(est.net_.head.out_features),
        "classes": ",".join(str(c) for c in est.classes_),
    }
    arrayio.write_manifest(directory / "manifest.txt", man)
    arrayio.save_arrays(directory / "classifier.arrays", _state_to_arrays(est.net_))


def load_classifier(directory: str | Path) -> ModalityClassifier:
    directory = Path(directory)
    man = arrayio.read_manifest(directory / "manifest.txt")
    est = ModalityClassifier(
        hidden=_ints(man["hidden"]),
        epochs=int(man["epochs"]),
        lr=float(man["lr"]),
        batch_size=int(man["batch_size"]),
        holdout_fraction=float(man["holdout_fraction"]),
        accuracy_floor=float(man["accuracy_floor"]),
        seed=int(man["seed"]),
    )
    est.net_ = MlpClassifier(int(man["in_dim"]), est.hidden, int(man["n_classes"]))
    _load_state(est.net_, arrayio.load_arrays(directory / "classifier.arrays"))
    est.accuracy_ = float(man["accuracy"])
    est.classes_ = np.array([int(c) for c in man["classes"].split(",")])
    return est
