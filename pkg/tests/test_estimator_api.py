"""Estimator-API conventions: get_params/clone, list inputs, fit_transform."""

import numpy as np
import pytest
from sklearn.base import clone

from jnfvae.datasets import as_multimodal_dataset
from jnfvae.dcca import DccaEmbedding
from jnfvae.evaluation import ModalityClassifier
from jnfvae.flows import UnimodalPosteriors
from jnfvae.joint import JointVAE

ESTIMATORS = [
    JointVAE(latent_dim=3, epochs=2, seed=7),
    UnimodalPosteriors(n_blocks=1, epochs=2, seed=7),
    DccaEmbedding(output_dim=4, epochs=2, seed=7),
    ModalityClassifier(epochs=2, seed=7),
]


@pytest.mark.parametrize("estimator", ESTIMATORS, ids=lambda e: type(e).__name__)
def test_get_params_round_trips_through_clone(estimator):
    copy = clone(estimator)
    assert copy.get_params() == estimator.get_params()
    copy.set_params(seed=11)
    assert copy.seed == 11 and estimator.seed == 7


def test_as_multimodal_dataset_infers_specs():
    rng = np.random.default_rng(0)
    binary = (rng.random((10, 4)) < 0.5).astype(float)
    real = rng.normal(size=(10, 3))
    ds = as_multimodal_dataset([binary, real])
    assert ds.specs[0].likelihood_family == "bernoulli"
    assert ds.specs[1].likelihood_family == "gaussian_unit_variance"
    assert ds.specs[1].shape == (3,)


def test_fit_accepts_plain_array_lists(tiny_toy):
    Xs = [m[:128] for m in tiny_toy.modalities]
    joint = JointVAE(latent_dim=2, encoder_hidden=(16,), decoder_hidden=(16,),
                     epochs=1, seed=0).fit(Xs)
    posts = UnimodalPosteriors(n_blocks=1, made_hidden=(8,), base_hidden=(16,),
                               epochs=1, seed=0).fit(Xs, joint)
    z = posts.sample(0, Xs[0][0], n=3)
    assert z.shape == (3, 2)


def test_dcca_fit_transform_composes(tiny_toy):
    Xs = [m[:128].reshape(128, -1) for m in tiny_toy.modalities]
    est = DccaEmbedding(output_dim=4, hidden=(16,), epochs=1, batch_size=64,
                        seed=0, d_keep=2)
    embedded = est.fit_transform(Xs)
    assert len(embedded) == 2
    assert embedded[0].shape == (128, 2)
    # same as calling transform on the dataset object
    ds = as_multimodal_dataset(Xs)
    again = est.transform(ds)
    assert np.array_equal(embedded[0], again[0])
