"""Synthetic data, partition and shared-set tests."""
import struct

import numpy as np
import pytest

from fsdfl.data import (DataError, Dataset, Partition, PartitionError,
                        SharedSet, label_histogram, label_kl_from_uniform,
                        load_idx_images, load_idx_labels, make_synthetic,
                        partition_dirichlet, partition_k_class, sample_shared)


class TestSynthetic:
    def test_shapes(self):
        s = make_synthetic(10, 200, 20, seed=0)
        assert s.train.inputs.shape == (2000, 20)
        assert s.test.inputs.shape == (500, 20)
        assert s.pool.inputs.shape == (500, 20)
        assert s.train.num_classes == 10

    def test_deterministic(self):
        a = make_synthetic(5, 30, 8, seed=7)
        b = make_synthetic(5, 30, 8, seed=7)
        assert np.array_equal(a.train.inputs, b.train.inputs)
        assert np.array_equal(a.train.labels, b.train.labels)

    def test_class_means_on_sphere(self):
        sep = 4.0
        s = make_synthetic(6, 500, 12, seed=3, separation=sep)
        for c in range(6):
            mu = s.train.inputs[s.train.labels == c].mean(axis=0)
            # empirical mean of 500 unit-variance points around a radius-4 mean
            assert abs(np.linalg.norm(mu) - sep) < 0.3

    def test_bad_args(self):
        with pytest.raises(DataError):
            make_synthetic(1, 10, 5, seed=0)

    def test_label_mismatch(self):
        with pytest.raises(DataError):
            Dataset(inputs=np.zeros((3, 2)), labels=np.zeros(2, int),
                    num_classes=2)

    def test_labels_out_of_range(self):
        with pytest.raises(DataError):
            Dataset(inputs=np.zeros((2, 2)), labels=np.array([0, 5]),
                    num_classes=2)


class TestPartitionKClass:
    def test_one_class_per_device(self):
        s = make_synthetic(10, 200, 20, seed=0)
        p = partition_k_class(s.train, 10, 1, seed=0)
        hist = label_histogram(p, s.train)
        for dev in range(10):
            assert (hist[dev] > 0).sum() == 1
            assert hist[dev].sum() == 200

    def test_two_classes_per_device(self):
        s = make_synthetic(10, 100, 20, seed=0)
        p = partition_k_class(s.train, 10, 2, seed=0)
        hist = label_histogram(p, s.train)
        assert all((hist[dev] > 0).sum() == 2 for dev in range(10))

    def test_disjoint_cover(self):
        s = make_synthetic(4, 50, 6, seed=1)
        p = partition_k_class(s.train, 4, 2, seed=1)
        all_idx = sorted(i for a in p.assignment for i in a)
        assert all_idx == list(range(len(s.train)))

    def test_insufficient_coverage(self):
        s = make_synthetic(10, 50, 6, seed=1)
        with pytest.raises(PartitionError):
            partition_k_class(s.train, 3, 1, seed=0)

    def test_deterministic(self):
        s = make_synthetic(6, 40, 5, seed=2)
        a = partition_k_class(s.train, 6, 2, seed=9)
        b = partition_k_class(s.train, 6, 2, seed=9)
        assert a.assignment == b.assignment


class TestPartitionDirichlet:
    def test_deterministic_and_nonempty(self):
        s = make_synthetic(10, 100, 8, seed=0)
        a = partition_dirichlet(s.train, 10, alpha=0.1, seed=4)
        b = partition_dirichlet(s.train, 10, alpha=0.1, seed=4)
        assert a.assignment == b.assignment
        assert all(len(x) > 0 for x in a.assignment)

    def test_low_alpha_skews(self):
        s = make_synthetic(10, 100, 8, seed=0)
        shares = []
        for seed in range(5):
            p = partition_dirichlet(s.train, 10, alpha=0.1, seed=seed)
            hist = label_histogram(p, s.train).astype(float)
            shares.append((hist / hist.sum(axis=0, keepdims=True)).max(axis=0))
        assert np.mean(np.concatenate(shares)) > 0.5

    def test_high_alpha_near_uniform(self):
        # enough samples that multinomial noise sits well below the 1% bound
        s = make_synthetic(3, 50_000, 4, seed=0)
        p = partition_dirichlet(s.train, 10, alpha=1e6, seed=0)
        hist = label_histogram(p, s.train).astype(float)
        shares = hist / hist.sum(axis=0, keepdims=True)
        assert np.max(np.abs(shares - 0.1)) < 0.01

    def test_alpha_positive(self):
        s = make_synthetic(3, 20, 4, seed=0)
        with pytest.raises(PartitionError):
            partition_dirichlet(s.train, 3, alpha=0.0, seed=0)


class TestPartitionValidation:
    def test_empty_device_rejected(self):
        with pytest.raises(PartitionError):
            Partition(assignment=((0, 1), ()))

    def test_overlap_rejected(self):
        with pytest.raises(PartitionError):
            Partition(assignment=((0, 1), (1, 2)))

    def test_json_round_trip(self):
        p = Partition(assignment=((0, 2), (1, 3, 4)))
        assert Partition.from_json(p.to_json()) == p


class TestSharedSet:
    def test_iid_sampling(self):
        s = make_synthetic(10, 100, 8, seed=0)
        sh = sample_shared(s.pool, 200, mode="iid", seed=0)
        assert len(sh) == 200
        assert len(set(sh.ids)) == 200
        assert all(0 <= i < len(s.pool) for i in sh.ids)

    def test_deterministic(self):
        s = make_synthetic(10, 100, 8, seed=0)
        a = sample_shared(s.pool, 50, seed=3)
        b = sample_shared(s.pool, 50, seed=3)
        assert a.ids == b.ids

    def test_dirichlet_mode(self):
        s = make_synthetic(10, 100, 8, seed=0)
        sh = sample_shared(s.pool, 300, mode="dirichlet", seed=1, alpha=0.5)
        assert len(sh) == 300

    def test_count_exceeds_pool(self):
        s = make_synthetic(3, 10, 4, seed=0)
        with pytest.raises(DataError):
            sample_shared(s.pool, len(s.pool) + 1)

    def test_unknown_mode(self):
        s = make_synthetic(3, 10, 4, seed=0)
        with pytest.raises(DataError):
            sample_shared(s.pool, 5, mode="stratified")

    def test_duplicate_ids_rejected(self):
        with pytest.raises(DataError):
            SharedSet(inputs=np.zeros((2, 3)), ids=(1, 1))


class TestLabelStats:
    def test_single_class_kl_is_log_k(self):
        s = make_synthetic(10, 200, 20, seed=0)
        p = partition_k_class(s.train, 10, 1, seed=0)
        kl = label_kl_from_uniform(p, s.train)
        assert np.allclose(kl, np.log(10.0), atol=1e-12)

    def test_uniform_kl_is_zero(self):
        d = Dataset(inputs=np.zeros((4, 2)), labels=np.array([0, 1, 0, 1]),
                    num_classes=2)
        p = Partition(assignment=((0, 1), (2, 3)))
        assert np.array_equal(label_kl_from_uniform(p, d), np.zeros(2))


class TestIdxLoaders:
    def test_images_round_trip(self, tmp_path):
        raw = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
        path = tmp_path / "imgs.idx"
        with open(path, "wb") as f:
            f.write(struct.pack(">IIII", 0x00000803, 2, 3, 4))
            f.write(raw.tobytes())
        X = load_idx_images(path)
        assert X.shape == (2, 12)
        assert np.allclose(X, raw.reshape(2, 12) / 255.0)

    def test_labels_round_trip(self, tmp_path):
        path = tmp_path / "labels.idx"
        with open(path, "wb") as f:
            f.write(struct.pack(">II", 0x00000801, 3))
            f.write(bytes([7, 0, 2]))
        assert np.array_equal(load_idx_labels(path), [7, 0, 2])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.idx"
        with open(path, "wb") as f:
            f.write(struct.pack(">IIII", 0xdeadbeef, 1, 1, 1))
        with pytest.raises(DataError):
            load_idx_images(path)
