"""Dataset ingestion, stratified subsetting, and the seeded loader."""

import pickle

import numpy as np
import pytest
import torch

from reldistill.data import (DatasetHandle, Loader, load_cifar10, load_dataset,
                             make_synthetic, stratified_subset_indices)
from reldistill.errors import IngestionError, UsageError


def write_cifar_fixture(root, n_per_batch=20, corrupt_file=None):
    """Standard batch files with tiny sample counts, real wire format."""
    base = root / "cifar-10-batches-py"
    base.mkdir(parents=True)
    rng = np.random.default_rng(0)
    for i, name in enumerate([f"data_batch_{k}" for k in range(1, 6)] + ["test_batch"]):
        payload = {
            b"data": rng.integers(0, 256, size=(n_per_batch, 3072), dtype=np.uint8),
            b"labels": list(rng.integers(0, 10, size=n_per_batch)),
        }
        path = base / name
        if name == corrupt_file:
            path.write_bytes(b"not a pickle at all")
        else:
            with open(path, "wb") as fh:
                pickle.dump(payload, fh)
    return base


class TestCifarIngestion:
    def test_reads_standard_layout(self, tmp_path):
        write_cifar_fixture(tmp_path)
        train, test = load_cifar10(tmp_path)
        assert len(train) == 100 and len(test) == 20
        assert train.images.shape == (100, 3, 32, 32)
        assert train.images.dtype == torch.float32
        # normalization applied: values no longer in [0, 1]
        assert float(train.images.min()) < 0
        assert set(np.unique(train.labels.numpy())) <= set(range(10))
        assert set(train.ids).isdisjoint(set(test.ids))

    def test_missing_file_reports_path(self, tmp_path):
        with pytest.raises(IngestionError, match="data_batch_1"):
            load_cifar10(tmp_path)

    def test_corrupt_file_reports_checksum(self, tmp_path):
        write_cifar_fixture(tmp_path, corrupt_file="data_batch_3")
        with pytest.raises(IngestionError, match="sha256"):
            load_cifar10(tmp_path)


class TestStratifiedSubset:
    def test_tenth_of_balanced_split(self):
        labels = np.repeat(np.arange(10), 50)
        idx = stratified_subset_indices(labels, 0.1, seed=0)
        counts = np.bincount(labels[idx], minlength=10)
        assert np.all(counts == 5)

    def test_full_fraction_identity(self):
        labels = np.repeat(np.arange(3), 7)
        idx = stratified_subset_indices(labels, 1.0, seed=0)
        assert np.array_equal(idx, np.arange(21))

    def test_within_one_of_proportional(self):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 5, size=333)
        for fraction in (0.1, 0.27, 0.5, 0.83):
            idx = stratified_subset_indices(labels, fraction, seed=3)
            counts = np.bincount(labels[idx], minlength=5)
            for cls in range(5):
                target = fraction * np.sum(labels == cls)
                assert abs(counts[cls] - target) <= 1.0

    def test_deterministic_under_seed(self):
        labels = np.repeat(np.arange(10), 50)
        a = stratified_subset_indices(labels, 0.3, seed=9)
        b = stratified_subset_indices(labels, 0.3, seed=9)
        assert np.array_equal(a, b)
        c = stratified_subset_indices(labels, 0.3, seed=10)
        assert not np.array_equal(a, c)

    def test_bad_fraction_rejected(self):
        with pytest.raises(UsageError):
            stratified_subset_indices(np.zeros(4, dtype=int), 0.0, seed=0)


class TestSynthetic:
    HANDLE = DatasetHandle(name="synthetic", num_classes=6, image_size=12,
                           train_per_class=10, test_per_class=4, seed=11)

    def test_shapes_and_balance(self):
        train, test = make_synthetic(self.HANDLE)
        assert len(train) == 60 and len(test) == 24
        assert train.images.shape == (60, 3, 12, 12)
        assert np.all(np.bincount(train.labels.numpy()) == 10)
        assert np.all(np.bincount(test.labels.numpy()) == 4)

    def test_train_test_disjoint_ids(self):
        train, test = make_synthetic(self.HANDLE)
        assert set(train.ids).isdisjoint(set(test.ids))

    def test_deterministic(self):
        a_train, _ = make_synthetic(self.HANDLE)
        b_train, _ = make_synthetic(self.HANDLE)
        assert torch.equal(a_train.images, b_train.images)

    def test_load_dataset_applies_subset(self):
        handle = DatasetHandle(name="synthetic", num_classes=6, image_size=12,
                               train_per_class=10, test_per_class=4, seed=11,
                               subset_fraction=0.5)
        train, test = load_dataset(handle)
        assert len(train) == 30 and len(test) == 24

    def test_unknown_dataset_rejected(self):
        with pytest.raises(UsageError):
            load_dataset(DatasetHandle(name="imagenet"))


class TestLoader:
    def make_dataset(self, n=30):
        return make_synthetic(DatasetHandle(
            name="synthetic", num_classes=3, image_size=8,
            train_per_class=n // 3, test_per_class=2, seed=4))[0]

    def test_batches_cover_dataset_once(self):
        ds = self.make_dataset()
        loader = Loader(ds, batch_size=7, shuffle=True, seed=0)
        seen = [i for ids, _x, _y in loader for i in ids]
        assert sorted(seen) == sorted(ds.ids)

    def test_epoch_orders_differ_but_replay_exactly(self):
        ds = self.make_dataset()
        loader_a = Loader(ds, 7, shuffle=True, seed=3)
        first = [list(ids) for ids, _x, _y in loader_a]
        second = [list(ids) for ids, _x, _y in loader_a]
        assert first != second  # epoch reshuffles
        loader_b = Loader(ds, 7, shuffle=True, seed=3)
        assert [list(ids) for ids, _x, _y in loader_b] == first

    def test_drop_last(self):
        ds = self.make_dataset()
        loader = Loader(ds, 8, shuffle=False, drop_last=True)
        sizes = [len(ids) for ids, _x, _y in loader]
        assert sizes == [8, 8, 8]
        assert len(loader) == 3

    def test_augmentation_changes_pixels_not_labels(self):
        ds = self.make_dataset()
        plain = Loader(ds, 10, shuffle=False, seed=1, augment=False)
        augmented = Loader(ds, 10, shuffle=False, seed=1, augment=True)
        (_, x0, y0), (_, x1, y1) = next(iter(plain)), next(iter(augmented))
        assert torch.equal(y0, y1)
        assert not torch.equal(x0, x1)
        assert x0.shape == x1.shape

    def test_empty_dataset_rejected(self):
        ds = self.make_dataset()
        empty = ds.subset(np.array([], dtype=int))
        with pytest.raises(UsageError):
            Loader(empty, 4, shuffle=False)
