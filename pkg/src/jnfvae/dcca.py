"""Canonical correlation machinery and deep CCA embeddings.

The training objective is the total correlation of the encoder outputs:
the sum of singular values of the whitened cross-covariance
T = (S1 + rI)^{-1/2} S12 (S2 + rI)^{-1/2}. With more than two
modalities the objective is the sum of all pairwise total correlations.
After training, a linear CCA rotation orders embedding coordinates by
correlation so the most-correlated ones can be kept.
"""

from __future__ import annotations

import warnings

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from .datasets import MultimodalDataset, as_multimodal_dataset, batch_iterator
from .networks import mlp
from .validation import (
    DTYPE,
    as_tensor,
    check_fitted,
    check_modalities,
    derive_seed,
    seeded_torch,
)

EIG_FLOOR = 1e-9


def _sym_inv_sqrt(mat: torch.Tensor) -> torch.Tensor:
    """Inverse square root of a symmetric PSD matrix via eigendecomposition."""
    mat = 0.5 * (mat + mat.T)
    eigvals, eigvecs = torch.linalg.eigh(mat)
    if not torch.isfinite(eigvals).all() or float(eigvals.detach().min()) < -1e-8:
        raise ValueError("covariance is not positive definite even after regularization")
    inv_sqrt = eigvals.clamp_min(EIG_FLOOR).rsqrt()
    return eigvecs @ torch.diag(inv_sqrt) @ eigvecs.T


def whitened_cross_covariance(sigma1, sigma2, sigma12, reg: float = 1e-3) -> torch.Tensor:
    """T = (S1 + rI)^{-1/2} S12 (S2 + rI)^{-1/2}."""
    s1, s2, s12 = as_tensor(sigma1), as_tensor(sigma2), as_tensor(sigma12)
    eye1 = torch.eye(s1.shape[0], dtype=DTYPE)
    eye2 = torch.eye(s2.shape[0], dtype=DTYPE)
    return _sym_inv_sqrt(s1 + reg * eye1) @ s12 @ _sym_inv_sqrt(s2 + reg * eye2)


def covariances(
    h1: torch.Tensor, h2: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Mean-centered covariance triple with 1/(N-1) normalization."""
    n = h1.shape[0]
    if n < 2:
        raise ValueError("need at least two samples to estimate covariances")
    a = h1 - h1.mean(dim=0)
    b = h2 - h2.mean(dim=0)
    s1 = a.T @ a / (n - 1)
    s2 = b.T @ b / (n - 1)
    s12 = a.T @ b / (n - 1)
    return s1, s2, s12


def total_correlation(
    sigma1, sigma2, sigma12, reg: float = 1e-3
) -> tuple[torch.Tensor, torch.Tensor]:
    """Total CCA correlation of a covariance triple.

    Returns (F, singular_values) where F is the sum of the singular
    values of the whitened cross-covariance, returned in descending
    order. With reg > 0 every singular value lies in [0, 1].
    """
    t = whitened_cross_covariance(sigma1, sigma2, sigma12, reg)
    eigvals = torch.linalg.eigvalsh(t.T @ t)
    singular = eigvals.clamp_min(0.0).sqrt()
    singular = torch.flip(singular, dims=(0,))
    return singular.sum(), singular


def _trace_norm_smooth(t: torch.Tensor) -> torch.Tensor:
    # sqrt floored away from zero: sqrt'(0) is infinite, which would blow
    # up gradients whenever a canonical direction is (near-)uncorrelated
    eigvals = torch.linalg.eigvalsh(t.T @ t)
    return eigvals.clamp_min(1e-12).sqrt().sum()


def dcca_loss(outputs: list[torch.Tensor], reg: float = 1e-3) -> torch.Tensor:
    """Negative summed pairwise total correlation of encoder outputs."""
    m = len(outputs)
    for h in outputs:
        if h.shape[0] <= h.shape[1]:
            raise ValueError(
                f"batch too small: {h.shape[0]} samples for output dim {h.shape[1]}"
            )
    loss = torch.zeros((), dtype=DTYPE)
    for i in range(m):
        for j in range(i + 1, m):
            t = whitened_cross_covariance(*covariances(outputs[i], outputs[j]), reg=reg)
            loss = loss - _trace_norm_smooth(t)
    return loss


def select_embedding_dim(spectrum, policy: str = "elbow", k: int | None = None, threshold_ratio: float = 0.5) -> int:
    """Pick how many embedding coordinates to keep.

    "elbow" keeps the singular values above threshold_ratio * max;
    "fixed" keeps k, clamped to the spectrum length with a warning.
    """
    spectrum = np.asarray(spectrum, dtype=np.float64)
    if policy == "elbow":
        if spectrum.size == 0:
            return 0
        tau = threshold_ratio * float(spectrum.max())
        return int((spectrum >= tau).sum())
    if policy == "fixed":
        if k is None:
            raise ValueError("policy 'fixed' requires k")
        if k > spectrum.size:
            warnings.warn(
                f"requested {k} embedding dims but spectrum has {spectrum.size}; clamping"
            )
            return int(spectrum.size)
        return int(k)
    raise ValueError(f"unknown selection policy {policy!r}")


class DccaEmbedding(BaseEstimator, TransformerMixin):
    """Shared-information encoders trained by total-correlation ascent.

    fit() trains one MLP per modality on paired batches, then computes
    the CCA rotation and the singular-value spectrum on the full data.
    transform() returns per-modality embeddings rotated into canonical
    coordinates and truncated to the ``d_keep`` most correlated ones.

    Parameters
    ----------
    output_dim : encoder output dimension before truncation.
    d_keep : coordinates kept by transform; None selects via `policy`.
    hidden : encoder MLP widths.
    reg : covariance regularizer added to both diagonals.
    epochs, lr, batch_size : optimization settings. The batch size must
        exceed output_dim so that batch covariances are estimable.
    """

    def __init__(
        self,
        output_dim: int = 16,
        d_keep: int | None = None,
        hidden: tuple[int, ...] = (512, 512),
        reg: float = 1e-3,
        epochs: int = 100,
        lr: float = 1e-3,
        batch_size: int = 800,
        policy: str = "elbow",
        seed: int = 0,
    ):
        self.output_dim = output_dim
        self.d_keep = d_keep
        self.hidden = hidden
        self.reg = reg
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.policy = policy
        self.seed = seed

    def _encode(self, i: int, x: torch.Tensor) -> torch.Tensor:
        return self.encoders_[i](x.reshape(x.shape[0], -1))

    def fit(self, dataset, y=None):
        dataset = as_multimodal_dataset(dataset)
        m = dataset.n_modalities
        if m < 2:
            raise ValueError("DCCA needs at least two modalities")
        with seeded_torch(derive_seed(self.seed, "dcca-init")):
            self.encoders_ = [
                mlp([spec.dim, *self.hidden, self.output_dim]).to(DTYPE)
                for spec in dataset.specs
            ]
        params = [p for enc in self.encoders_ for p in enc.parameters()]
        opt = torch.optim.Adam(params, lr=self.lr)
        shuffle_seed = derive_seed(self.seed, "dcca-shuffle")
        batch_size = min(self.batch_size, len(dataset))
        if batch_size <= self.output_dim:
            raise ValueError("batch size must exceed output_dim for covariance estimation")
        self.loss_curve_ = []
        for epoch in range(self.epochs):
            total, count = 0.0, 0
            for batch in batch_iterator(dataset, batch_size, shuffle_seed, epoch):
                if len(batch) <= self.output_dim:
                    continue  # trailing partial batch too small for covariances
                xs = check_modalities(batch.modalities)
                outputs = [self._encode(i, xs[i]) for i in range(m)]
                loss = dcca_loss(outputs, reg=self.reg)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(batch)
                count += len(batch)
            self.loss_curve_.append(total / max(count, 1))
        self._finalize(dataset)
        return self

    def _finalize(self, dataset: MultimodalDataset) -> None:
        """Compute rotations and spectra on the full dataset."""
        m = dataset.n_modalities
        xs = check_modalities(dataset.modalities)
        with torch.no_grad():
            outputs = [self._encode(i, xs[i]) for i in range(m)]
        self.means_ = [h.mean(dim=0) for h in outputs]
        whiteners, self.spectra_ = [], {}
        covs = {}
        for i in range(m):
            s_ii, _, _ = covariances(outputs[i], outputs[i])
            eye = torch.eye(self.output_dim, dtype=DTYPE)
            whiteners.append(_sym_inv_sqrt(s_ii + self.reg * eye))
        for i in range(m):
            for j in range(i + 1, m):
                _, _, s_ij = covariances(outputs[i], outputs[j])
                covs[(i, j)] = whiteners[i] @ s_ij @ whiteners[j]
        rotations: list[torch.Tensor] = []
        if m == 2:
            u, s, vh = torch.linalg.svd(covs[(0, 1)])
            self.spectra_[(0, 1)] = s.numpy()
            rotations = [whiteners[0] @ u, whiteners[1] @ vh.T]
        else:
            for i in range(m):
                consensus = torch.zeros(self.output_dim, self.output_dim, dtype=DTYPE)
                for j in range(m):
                    if i == j:
                        continue
                    t = covs[(i, j)] if i < j else covs[(j, i)].T
                    consensus = consensus + t @ t.T
                eigvals, eigvecs = torch.linalg.eigh(consensus)
                order = torch.argsort(eigvals, descending=True)
                rotations.append(whiteners[i] @ eigvecs[:, order])
            for i in range(m):
                for j in range(i + 1, m):
                    s = torch.linalg.svdvals(covs[(i, j)])
                    self.spectra_[(i, j)] = s.numpy()
        self.rotations_ = rotations
        self.spectrum_ = self.spectra_[(0, 1)]
        d_keep = self.d_keep
        if d_keep is None:
            d_keep = select_embedding_dim(self.spectrum_, policy=self.policy)
        self.embedding_dim_ = min(int(d_keep), self.output_dim)

    def transform_single(self, i: int, x, d_keep: int | None = None) -> np.ndarray:
        """Embed one modality's (flattened) batch."""
        check_fitted(self, "rotations_")
        if d_keep is None:
            d_keep = self.embedding_dim_
        x = as_tensor(x)
        with torch.no_grad():
            h = self._encode(i, x) - self.means_[i]
            emb = h @ self.rotations_[i]
        return emb[:, :d_keep].numpy()

    def transform(self, Xs, d_keep: int | None = None) -> list[np.ndarray]:
        check_fitted(self, "rotations_")
        if isinstance(Xs, MultimodalDataset):
            Xs = Xs.modalities
        xs = check_modalities(Xs, len(self.encoders_))
        return [self.transform_single(i, xs[i], d_keep) for i in range(len(xs))]
