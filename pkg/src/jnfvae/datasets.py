"""Multimodal dataset construction: synthetic shapes, label pairing, batching.

The synthetic set pairs square images with circle images. Both shapes
are centered; the filled/outline flag is shared within a pair while the
two sizes are drawn independently, so the only cross-modal information
is the fill bit (plus, in the two-attribute variant, a coarse size bit).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import arrayio
from .likelihoods import BERNOULLI, FAMILIES, GAUSSIAN


@dataclass(frozen=True)
class ModalitySpec:
    """Shape and observation family of one modality."""

    name: str
    shape: tuple[int, ...]
    likelihood_family: str = BERNOULLI

    def __post_init__(self):
        if any(s < 1 for s in self.shape):
            raise ValueError(f"modality {self.name}: shape dims must be >= 1")
        if self.likelihood_family not in FAMILIES:
            raise ValueError(f"unknown likelihood family {self.likelihood_family!r}")

    @property
    def dim(self) -> int:
        return int(np.prod(self.shape))


@dataclass
class MultimodalDataset:
    """Aligned per-modality arrays with optional shared labels and metadata."""

    modalities: list[np.ndarray]
    specs: list[ModalitySpec]
    labels: np.ndarray | None = None
    meta: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.modalities[0])
        for spec, arr in zip(self.specs, self.modalities):
            if arr.shape[0] != n:
                raise ValueError("modalities must share the sample count")
            if tuple(arr.shape[1:]) != spec.shape:
                raise ValueError(
                    f"modality {spec.name}: array shape {arr.shape[1:]} != spec {spec.shape}"
                )
        if self.labels is not None and len(self.labels) != n:
            raise ValueError("labels length must match sample count")

    def __len__(self) -> int:
        return len(self.modalities[0])

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    def subset(self, idx: np.ndarray) -> "MultimodalDataset":
        return MultimodalDataset(
            modalities=[m[idx] for m in self.modalities],
            specs=self.specs,
            labels=None if self.labels is None else self.labels[idx],
            meta={k: v[idx] for k, v in self.meta.items()},
        )

    def split(self, n_first: int) -> tuple["MultimodalDataset", "MultimodalDataset"]:
        idx = np.arange(len(self))
        return self.subset(idx[:n_first]), self.subset(idx[n_first:])


def as_multimodal_dataset(Xs, families: list[str] | None = None) -> MultimodalDataset:
    """Coerce a list of per-modality arrays into a dataset.

    Shapes come from the arrays; the observation family defaults to
    Bernoulli when all values sit in [0, 1] and unit-variance Gaussian
    otherwise. Estimator fit() methods accept either form.
    """
    if hasattr(Xs, "specs"):  # already dataset-like
        return Xs
    arrays = [np.asarray(x, dtype=np.float64) for x in Xs]
    specs = []
    for i, arr in enumerate(arrays):
        if families is not None:
            family = families[i]
        else:
            family = BERNOULLI if arr.min() >= 0.0 and arr.max() <= 1.0 else GAUSSIAN
        specs.append(ModalitySpec(f"modality_{i}", tuple(arr.shape[1:]), family))
    return MultimodalDataset(arrays, specs)


@dataclass(frozen=True)
class ToyConfig:
    """Settings for the paired squares/circles generator."""

    image_side: int = 32
    size_min: int = 3
    size_max: int = 13
    outline_thickness: int = 1
    fill_probability: float = 0.5
    n_samples: int = 1000
    seed: int = 0
    shared_size_bit: bool = False

    def validate(self) -> None:
        if not (0 < self.size_min <= self.size_max < self.image_side / 2):
            raise ValueError(
                "invalid toy config: need 0 < size_min <= size_max < image_side/2"
            )
        if not (0.0 <= self.fill_probability <= 1.0):
            raise ValueError("invalid toy config: fill_probability must be in [0, 1]")
        if self.outline_thickness < 1:
            raise ValueError("invalid toy config: outline_thickness must be >= 1")
        if self.n_samples < 1:
            raise ValueError("invalid toy config: n_samples must be >= 1")


def _square_image(side: int, half: int, filled: bool, thickness: int) -> np.ndarray:
    img = np.zeros((side, side), dtype=np.float64)
    c = side // 2
    lo, hi = c - half, c + half
    img[lo : hi + 1, lo : hi + 1] = 1.0
    if not filled:
        t = thickness
        inner_lo, inner_hi = lo + t, hi - t
        if inner_lo <= inner_hi:
            img[inner_lo : inner_hi + 1, inner_lo : inner_hi + 1] = 0.0
    return img


def _circle_image(side: int, radius: int, filled: bool, thickness: int) -> np.ndarray:
    c = side // 2
    yy, xx = np.mgrid[0:side, 0:side]
    dist2 = (yy - c) ** 2 + (xx - c) ** 2
    img = (dist2 <= radius**2).astype(np.float64)
    if not filled:
        inner = radius - thickness
        if inner > 0:
            img[dist2 <= inner**2] = 0.0
    return img


def generate_toy_dataset(cfg: ToyConfig) -> MultimodalDataset:
    """Paired centered squares (modality 0) and circles (modality 1).

    The fill/outline flag is shared within each pair; the square
    half-side and circle radius are independent uniform integers on
    [size_min, size_max]. With ``shared_size_bit`` the size range is
    split in two and the coarse half is shared too, giving a 4-class
    shared label (fill bit + size bit); fine sizes stay independent.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    side = cfg.image_side
    n = cfg.n_samples

    filled = rng.random(n) < cfg.fill_probability
    if cfg.shared_size_bit:
        mid = (cfg.size_min + cfg.size_max) // 2
        size_bit = rng.random(n) < 0.5
        lo = np.where(size_bit, mid + 1, cfg.size_min)
        hi = np.where(size_bit, cfg.size_max, mid)
        sq = rng.integers(lo, hi + 1)
        ci = rng.integers(lo, hi + 1)
        labels = filled.astype(np.int64) * 2 + size_bit.astype(np.int64)
    else:
        sq = rng.integers(cfg.size_min, cfg.size_max + 1, size=n)
        ci = rng.integers(cfg.size_min, cfg.size_max + 1, size=n)
        labels = filled.astype(np.int64)

    squares = np.stack(
        [_square_image(side, int(s), bool(f), cfg.outline_thickness) for s, f in zip(sq, filled)]
    )
    circles = np.stack(
        [_circle_image(side, int(r), bool(f), cfg.outline_thickness) for r, f in zip(ci, filled)]
    )
    specs = [
        ModalitySpec("squares", (side, side), BERNOULLI),
        ModalitySpec("circles", (side, side), BERNOULLI),
    ]
    meta = {
        "square_size": sq.astype(np.int64),
        "circle_size": ci.astype(np.int64),
        "filled": filled.astype(np.int64),
    }
    return MultimodalDataset([squares, circles], specs, labels=labels, meta=meta)


def pair_by_label(
    datasets: list[tuple[np.ndarray, np.ndarray]],
    specs: list[ModalitySpec],
    matches_per_item: int,
    seed: int = 0,
) -> MultimodalDataset:
    """Pair unimodal labeled datasets into a multimodal one by label.

    ``datasets`` holds (data, labels) per modality. For every label the
    class counts are truncated to the smallest dataset's count and the
    truncated classes are zipped; this is repeated ``matches_per_item``
    times with fresh shuffles, so each item of the smallest class list
    appears in exactly ``matches_per_item`` pairs.
    """
    if matches_per_item < 1:
        raise ValueError("matches_per_item must be >= 1")
    rng = np.random.default_rng(seed)
    label_sets = [np.unique(lbl) for _, lbl in datasets]
    common = label_sets[0]
    for ls in label_sets[1:]:
        common = np.intersect1d(common, ls)
    union = label_sets[0]
    for ls in label_sets[1:]:
        union = np.union1d(union, ls)
    missing = np.setdiff1d(union, common)
    if common.size == 0:
        raise ValueError("label mismatch: no labels are shared by all datasets")
    if missing.size > 0:
        raise ValueError(
            f"empty class: labels {missing.tolist()} are absent from some dataset"
        )

    index_lists: list[list[np.ndarray]] = []  # per round, per modality
    out_labels: list[np.ndarray] = []
    for _ in range(matches_per_item):
        round_idx = [[] for _ in datasets]
        round_lbl = []
        for lab in common:
            per_mod = [np.flatnonzero(lbl == lab) for _, lbl in datasets]
            n_min = min(len(ix) for ix in per_mod)
            for m, ix in enumerate(per_mod):
                chosen = rng.permutation(ix)[:n_min]
                round_idx[m].append(chosen)
            round_lbl.append(np.full(n_min, lab, dtype=np.int64))
        index_lists.append([np.concatenate(lst) for lst in round_idx])
        out_labels.append(np.concatenate(round_lbl))

    modalities = []
    for m, (data, _) in enumerate(datasets):
        picks = np.concatenate([round_idx[m] for round_idx in index_lists])
        modalities.append(data[picks])
    labels = np.concatenate(out_labels)
    return MultimodalDataset(modalities, specs, labels=labels)


def paired_size(class_counts: list[dict[int, int]], matches_per_item: int) -> int:
    """Number of pairs :func:`pair_by_label` produces for given class counts."""
    labels = set(class_counts[0])
    for cc in class_counts[1:]:
        labels &= set(cc)
    return matches_per_item * sum(min(cc[lab] for cc in class_counts) for lab in labels)


def batch_iterator(
    dataset: MultimodalDataset,
    batch_size: int,
    shuffle_seed: int | None = None,
    epoch: int = 0,
):
    """Yield per-epoch batches as lists of per-modality arrays.

    Every sample is visited exactly once; the final partial batch is
    emitted. The permutation is deterministic per (shuffle_seed, epoch);
    with ``shuffle_seed=None`` storage order is preserved.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng((shuffle_seed, epoch)).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield dataset.subset(idx)


def save_dataset(dataset: MultimodalDataset, directory: str | Path) -> None:
    """Write one raw binary file per modality plus labels and a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest: dict[str, str] = {
        "n_samples": str(len(dataset)),
        "n_modalities": str(dataset.n_modalities),
        "format": "jnfvae-dataset-1",
    }
    for i, (spec, arr) in enumerate(zip(dataset.specs, dataset.modalities)):
        fname = f"modality_{i}.bin"
        dtype, shape = arrayio.save_raw(directory / fname, arr)
        manifest[f"modality_{i}.file"] = fname
        manifest[f"modality_{i}.name"] = spec.name
        manifest[f"modality_{i}.dtype"] = dtype
        manifest[f"modality_{i}.shape"] = shape
        manifest[f"modality_{i}.family"] = spec.likelihood_family
    if dataset.labels is not None:
        dtype, shape = arrayio.save_raw(directory / "labels.bin", dataset.labels.astype(np.int64))
        manifest["labels.file"] = "labels.bin"
        manifest["labels.dtype"] = dtype
        manifest["labels.shape"] = shape
    for key, arr in sorted(dataset.meta.items()):
        fname = f"meta_{key}.bin"
        dtype, shape = arrayio.save_raw(directory / fname, arr)
        manifest[f"meta.{key}.file"] = fname
        manifest[f"meta.{key}.dtype"] = dtype
        manifest[f"meta.{key}.shape"] = shape
    arrayio.write_manifest(directory / "manifest.txt", manifest)


def load_dataset(directory: str | Path) -> MultimodalDataset:
    """Read a dataset directory written by :func:`save_dataset`."""
    directory = Path(directory)
    manifest = arrayio.read_manifest(directory / "manifest.txt")
    n_mod = int(manifest["n_modalities"])
    modalities, specs = [], []
    for i in range(n_mod):
        arr = arrayio.load_raw(
            directory / manifest[f"modality_{i}.file"],
            manifest[f"modality_{i}.dtype"],
            manifest[f"modality_{i}.shape"],
        )
        modalities.append(arr)
        specs.append(
            ModalitySpec(
                manifest[f"modality_{i}.name"],
                tuple(arr.shape[1:]),
                manifest[f"modality_{i}.family"],
            )
        )
    labels = None
    if "labels.file" in manifest:
        labels = arrayio.load_raw(
            directory / manifest["labels.file"], manifest["labels.dtype"], manifest["labels.shape"]
        )
    meta = {}
    for key in manifest:
        if key.startswith("meta.") and key.endswith(".file"):
            name = key[len("meta.") : -len(".file")]
            meta[name] = arrayio.load_raw(
                directory / manifest[f"meta.{name}.file"],
                manifest[f"meta.{name}.dtype"],
                manifest[f"meta.{name}.shape"],
            )
    return MultimodalDataset(modalities, specs, labels=labels, meta=meta)
