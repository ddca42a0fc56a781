"""Dataset construction: toy shapes, label pairing, batching, disk format."""

import subprocess
import sys

import numpy as np
import pytest

from jnfvae.datasets import (
    ModalitySpec,
    ToyConfig,
    batch_iterator,
    generate_toy_dataset,
    load_dataset,
    pair_by_label,
    paired_size,
    save_dataset,
)

# per-class training counts of the usual digit benchmarks; used to check
# the pairing arithmetic against the published split sizes
MNIST_COUNTS = [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949]
SVHN_COUNTS = [4948, 13861, 10585, 8497, 7458, 6882, 5727, 5595, 5045, 4659]
FASHION_COUNTS = [6000] * 10


class TestToyGeneration:
    def test_fill_probability_one_gives_all_filled(self):
        ds = generate_toy_dataset(ToyConfig(n_samples=64, fill_probability=1.0, seed=1))
        assert np.all(ds.labels == 1)
        assert np.all(ds.meta["filled"] == 1)

    def test_deterministic_given_seed(self):
        a = generate_toy_dataset(ToyConfig(n_samples=50, seed=123))
        b = generate_toy_dataset(ToyConfig(n_samples=50, seed=123))
        for m1, m2 in zip(a.modalities, b.modalities):
            assert np.array_equal(m1, m2)
        assert np.array_equal(a.labels, b.labels)

    def test_sizes_independent(self):
        # independence by construction; oracle = sample Pearson correlation
        ds = generate_toy_dataset(ToyConfig(n_samples=10000, seed=5))
        r = np.corrcoef(ds.meta["square_size"], ds.meta["circle_size"])[0, 1]
        assert abs(r) < 0.05

    def test_fill_flag_shared_within_every_pair(self):
        ds = generate_toy_dataset(ToyConfig(n_samples=500, seed=9))
        side = ds.specs[0].shape[0]
        c = side // 2
        # center pixel is lit iff the shape is filled (sizes are >= 3 > thickness)
        sq_filled = ds.modalities[0][:, c, c] > 0.5
        ci_filled = ds.modalities[1][:, c, c] > 0.5
        assert np.array_equal(sq_filled, ds.meta["filled"] == 1)
        assert np.array_equal(sq_filled, ci_filled)

    def test_pixels_binary_and_centered(self):
        ds = generate_toy_dataset(ToyConfig(n_samples=32, seed=2))
        for arr in ds.modalities:
            assert set(np.unique(arr)) <= {0.0, 1.0}
        c = 16
        for img, half in zip(ds.modalities[0], ds.meta["square_size"]):
            rows = np.flatnonzero(img.any(axis=1))
            assert rows[0] == c - half and rows[-1] == c + half

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            generate_toy_dataset(ToyConfig(size_min=0, n_samples=4))
        with pytest.raises(ValueError):
            generate_toy_dataset(ToyConfig(size_min=10, size_max=3, n_samples=4))
        with pytest.raises(ValueError):
            generate_toy_dataset(ToyConfig(size_max=20, image_side=32, n_samples=4))
        with pytest.raises(ValueError):
            generate_toy_dataset(ToyConfig(fill_probability=1.5, n_samples=4))

    def test_shared_size_bit_labels(self):
        ds = generate_toy_dataset(ToyConfig(n_samples=400, seed=3, shared_size_bit=True))
        assert set(np.unique(ds.labels)) == {0, 1, 2, 3}
        # size bit shared: both sizes fall in the same coarse half
        mid = (3 + 13) // 2
        sq_big = ds.meta["square_size"] > mid
        ci_big = ds.meta["circle_size"] > mid
        assert np.array_equal(sq_big, ci_big)


def _fake_labeled(counts, seed):
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.full(c, lab) for lab, c in enumerate(counts)])
    rng.shuffle(labels)
    data = labels.astype(np.float64).reshape(-1, 1)  # payload irrelevant for pairing
    return data, labels


class TestPairByLabel:
    def test_single_pair(self):
        d1 = (np.zeros((1, 1)), np.array([3]))
        d2 = (np.ones((1, 1)), np.array([3]))
        specs = [ModalitySpec("a", (1,)), ModalitySpec("b", (1,))]
        out = pair_by_label([d1, d2], specs, matches_per_item=1, seed=0)
        assert len(out) == 1
        assert out.labels[0] == 3

    def test_labels_match_and_multiplicity(self):
        counts = [40, 25, 35]
        d1 = _fake_labeled(counts, 1)
        d2 = _fake_labeled(counts, 2)
        specs = [ModalitySpec("a", (1,)), ModalitySpec("b", (1,))]
        out = pair_by_label([d1, d2], specs, matches_per_item=3, seed=0)
        assert len(out) == 3 * sum(counts)
        # payload encodes the label, so pairing correctness is visible in data
        assert np.array_equal(out.modalities[0][:, 0].astype(int), out.labels)
        assert np.array_equal(out.modalities[1][:, 0].astype(int), out.labels)
        # equal class counts: every base item appears exactly matches_per_item times
        vals, cnts = np.unique(out.modalities[0][:, 0], return_counts=True)
        for lab, cnt in zip(vals.astype(int), cnts):
            assert cnt == 3 * counts[lab]

    def test_mnist_svhn_published_split_size(self):
        # 5 matches per item, then 10000 pairs held out for validation
        d1 = _fake_labeled(MNIST_COUNTS, 1)
        d2 = _fake_labeled(SVHN_COUNTS, 2)
        specs = [ModalitySpec("m", (1,)), ModalitySpec("s", (1,))]
        out = pair_by_label([d1, d2], specs, matches_per_item=5, seed=0)
        assert len(out) == paired_size(
            [dict(enumerate(MNIST_COUNTS)), dict(enumerate(SVHN_COUNTS))], 5
        )
        train, val = out.split(len(out) - 10000)
        assert len(train) == 270340
        assert len(val) == 10000

    def test_trimodal_published_split_size(self):
        d1 = _fake_labeled(MNIST_COUNTS, 1)
        d2 = _fake_labeled(SVHN_COUNTS, 2)
        d3 = _fake_labeled(FASHION_COUNTS, 3)
        specs = [ModalitySpec(n, (1,)) for n in "msf"]
        out = pair_by_label([d1, d2, d3], specs, matches_per_item=5, seed=0)
        assert len(out) == 275975

    def test_deterministic(self):
        d1 = _fake_labeled([10, 12], 1)
        d2 = _fake_labeled([11, 9], 2)
        specs = [ModalitySpec("a", (1,)), ModalitySpec("b", (1,))]
        a = pair_by_label([d1, d2], specs, 2, seed=5)
        b = pair_by_label([d1, d2], specs, 2, seed=5)
        assert np.array_equal(a.modalities[0], b.modalities[0])
        assert np.array_equal(a.modalities[1], b.modalities[1])

    def test_disjoint_labels_rejected(self):
        d1 = (np.zeros((4, 1)), np.array([0, 0, 1, 1]))
        d2 = (np.zeros((4, 1)), np.array([2, 2, 3, 3]))
        specs = [ModalitySpec("a", (1,)), ModalitySpec("b", (1,))]
        with pytest.raises(ValueError, match="label mismatch"):
            pair_by_label([d1, d2], specs, 1, seed=0)

    def test_partially_missing_label_rejected(self):
        d1 = (np.zeros((4, 1)), np.array([0, 0, 1, 1]))
        d2 = (np.zeros((4, 1)), np.array([0, 0, 0, 0]))
        specs = [ModalitySpec("a", (1,)), ModalitySpec("b", (1,))]
        with pytest.raises(ValueError, match="empty class"):
            pair_by_label([d1, d2], specs, 1, seed=0)


class TestBatchIterator:
    def test_batch_sizes_with_partial_tail(self, tiny_toy):
        ds = tiny_toy.subset(np.arange(10))
        sizes = [len(b) for b in batch_iterator(ds, 4)]
        assert sizes == [4, 4, 2]

    def test_no_shuffle_preserves_order(self, tiny_toy):
        ds = tiny_toy.subset(np.arange(16))
        batches = list(batch_iterator(ds, 16, shuffle_seed=None))
        assert np.array_equal(batches[0].modalities[0], ds.modalities[0])

    def test_each_sample_once_per_epoch(self, tiny_toy):
        ds = tiny_toy.subset(np.arange(37))
        seen = np.concatenate(
            [b.meta["square_size"] for b in batch_iterator(ds, 8, shuffle_seed=3)]
        )
        assert sorted(seen) == sorted(ds.meta["square_size"])

    def test_epochs_distinct_but_reproducible_across_processes(self):
        # permutations differ per epoch yet are identical across process runs
        snippet = (
            "import numpy as np\n"
            "from jnfvae.datasets import ToyConfig, generate_toy_dataset, batch_iterator\n"
            "ds = generate_toy_dataset(ToyConfig(n_samples=40, seed=1))\n"
            "for epoch in (0, 1):\n"
            "    order = np.concatenate([b.meta['square_size'] for b in batch_iterator(ds, 7, 99, epoch)])\n"
            "    print(','.join(map(str, order)))\n"
        )
        runs = [
            subprocess.run(
                [sys.executable, "-c", snippet], capture_output=True, text=True, check=True
            ).stdout
            for _ in range(2)
        ]
        assert runs[0] == runs[1]
        epoch0, epoch1 = runs[0].strip().splitlines()
        assert epoch0 != epoch1

    def test_batch_size_validation(self, tiny_toy):
        with pytest.raises(ValueError):
            next(batch_iterator(tiny_toy, 0))


class TestDiskFormat:
    def test_round_trip(self, tiny_toy, tmp_path):
        save_dataset(tiny_toy, tmp_path / "ds")
        back = load_dataset(tmp_path / "ds")
        assert len(back) == len(tiny_toy)
        for a, b in zip(back.modalities, tiny_toy.modalities):
            assert np.array_equal(a, b)
        assert np.array_equal(back.labels, tiny_toy.labels)
        assert np.array_equal(back.meta["square_size"], tiny_toy.meta["square_size"])
        assert [s.name for s in back.specs] == [s.name for s in tiny_toy.specs]
        assert [s.likelihood_family for s in back.specs] == [
            s.likelihood_family for s in tiny_toy.specs
        ]

    def test_manifest_is_plain_text(self, tiny_toy, tmp_path):
        save_dataset(tiny_toy, tmp_path / "ds")
        manifest = (tmp_path / "ds" / "manifest.txt").read_text()
        assert f"modality_0.shape={len(tiny_toy)},32,32" in manifest
        assert "modality_0.dtype=" in manifest
        assert "modality_0.family=bernoulli" in manifest
