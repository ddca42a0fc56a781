"""Input validation and determinism helpers shared across estimators."""

from __future__ import annotations

import contextlib
import hashlib

import numpy as np
import torch

# All model math runs in float64: cheap at this scale and it keeps
# quadrature, finite-difference and MCMC reversibility checks tight.
DTYPE = torch.float64


class ConfigError(ValueError):
    """Raised for invalid configuration before any work starts."""


class StageFailure(RuntimeError):
    """Raised when a pipeline stage fails; carries the stage name."""

    def __init__(self, stage: str, cause: BaseException | str):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


def as_tensor(x) -> torch.Tensor:
    """Convert array-like input to a float64 torch tensor."""
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x), dtype=DTYPE)


def check_modalities(Xs, n_modalities: int | None = None) -> list[torch.Tensor]:
    """Validate a multimodal batch: list of per-modality arrays.

    Each entry must be array-like with the same leading sample count;
    entries are returned as float64 tensors flattened checks aside.
    """
    if isinstance(Xs, (np.ndarray, torch.Tensor)):
        raise ValueError("multimodal input must be a list/tuple of per-modality arrays")
    Xs = [as_tensor(x) for x in Xs]
    if len(Xs) == 0:
        raise ValueError("need at least one modality")
    if n_modalities is not None and len(Xs) != n_modalities:
        raise ValueError(f"expected {n_modalities} modalities, got {len(Xs)}")
    n = Xs[0].shape[0]
    for i, x in enumerate(Xs):
        if x.shape[0] != n:
            raise ValueError(f"modality {i} has {x.shape[0]} samples, expected {n}")
        if not torch.isfinite(x).all():
            raise ValueError(f"modality {i} contains non-finite values")
    return Xs


def flatten_batch(x: torch.Tensor) -> torch.Tensor:
    return x.reshape(x.shape[0], -1)


def check_fitted(estimator, attribute: str) -> None:
    if not hasattr(estimator, attribute):
        raise RuntimeError(
            f"{type(estimator).__name__} is not fitted; call fit() before use"
        )


def derive_seed(seed: int, label: str) -> int:
    """Stable per-stage seed derived from a base seed and a label."""
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@contextlib.contextmanager
def seeded_torch(seed: int):
    """Run a block under a forked, seeded torch RNG (module init etc.)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def new_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed) % (2**63 - 1))
    return gen
