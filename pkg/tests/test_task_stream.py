import math

import numpy as np
import pytest

from forgetnot.errors import ConfigError, SchemaError
from forgetnot.task_stream import (StreamConfig, batches, load_medmnist_file,
                                   make_synthetic_stream, split_class_incremental,
                                   union_dataset)


def _write_archive(path, n=30, h=8, w=8, missing=None, dtype=np.uint8):
    rng = np.random.default_rng(0)
    arrays = {}
    for split, count in (("train", n), ("val", max(n // 5, 4)), ("test", max(n // 3, 6))):
        if dtype == np.uint8:
            arrays[f"{split}_images"] = rng.integers(0, 256, size=(count, h, w), dtype=np.uint8)
        else:
            arrays[f"{split}_images"] = rng.integers(0, 256, size=(count, h, w)).astype(dtype)
        arrays[f"{split}_labels"] = rng.integers(0, 4, size=count)
    if missing:
        del arrays[missing]
    np.savez(path, **arrays)
    return arrays


class TestLoader:
    def test_uint8_normalized_with_channel_axis(self, tmp_path):
        path = tmp_path / "data.npz"
        arrays = _write_archive(path)
        train, val, test = load_medmnist_file(path)
        assert train.images.shape == (30, 8, 8, 1)
        assert train.images.min() >= 0.0 and train.images.max() <= 1.0
        # max uint8 value maps exactly to 1.0
        assert np.isclose(train.images.max(), arrays["train_images"].max() / 255.0)

    def test_missing_array_is_schema_error(self, tmp_path):
        path = tmp_path / "broken.npz"
        _write_archive(path, missing="val_labels")
        with pytest.raises(SchemaError, match="val_labels"):
            load_medmnist_file(path)

    def test_integer_non_uint8_is_type_error(self, tmp_path):
        path = tmp_path / "badtype.npz"
        _write_archive(path, dtype=np.int32)
        with pytest.raises(TypeError):
            load_medmnist_file(path)

    def test_uint8_255_maps_to_one(self, tmp_path):
        path = tmp_path / "ones.npz"
        arrays = {}
        for split in ("train", "val", "test"):
            arrays[f"{split}_images"] = np.full((4, 5, 5), 255, dtype=np.uint8)
            arrays[f"{split}_labels"] = np.zeros(4, dtype=np.int64)
        np.savez(path, **arrays)
        train, _, _ = load_medmnist_file(path)
        assert (train.images == 1.0).all()


class TestSyntheticStream:
    def test_partition_and_disjointness(self):
        stream = make_synthetic_stream(StreamConfig(num_tasks=3, classes_per_task=2, seed=7))
        assert [t.class_set for t in stream.tasks] == [(0, 1), (2, 3), (4, 5)]
        seen = set()
        for task in stream.tasks:
            assert not (seen & set(task.class_set))
            seen |= set(task.class_set)

    def test_determinism_bit_exact(self):
        cfg = StreamConfig(num_tasks=3, classes_per_task=2, seed=7)
        s1 = make_synthetic_stream(cfg)
        s2 = make_synthetic_stream(StreamConfig(num_tasks=3, classes_per_task=2, seed=7))
        for t1, t2 in zip(s1.tasks, s2.tasks):
            for split in ("train", "val", "test"):
                a, b = getattr(t1, split), getattr(t2, split)
                assert a.images.tobytes() == b.images.tobytes()
                assert a.labels.tobytes() == b.labels.tobytes()

    def test_different_seed_differs(self):
        a = make_synthetic_stream(StreamConfig(num_tasks=2, classes_per_task=2, seed=1))
        b = make_synthetic_stream(StreamConfig(num_tasks=2, classes_per_task=2, seed=2))
        assert a.tasks[0].train.images.tobytes() != b.tasks[0].train.images.tobytes()

    def test_low_shot_train_only(self):
        full = make_synthetic_stream(StreamConfig(num_tasks=2, classes_per_task=2, seed=0))
        low = make_synthetic_stream(StreamConfig(num_tasks=2, classes_per_task=2, seed=0,
                                                 low_shot_fraction=0.1))
        for tf, tl in zip(full.tasks, low.tasks):
            per_class_full = len(tf.train) // len(tf.class_set)
            expected = math.ceil(0.1 * per_class_full) * len(tf.class_set)
            assert len(tl.train) == expected
            assert len(tl.val) == len(tf.val)
            assert len(tl.test) == len(tf.test)

    def test_normalization_invariant(self, small_stream):
        for task in small_stream:
            for split in (task.train, task.val, task.test):
                assert split.images.min() >= 0.0
                assert split.images.max() <= 1.0

    def test_vocabulary_exhaustion(self):
        with pytest.raises(ConfigError):
            make_synthetic_stream(StreamConfig(num_tasks=9, classes_per_task=2, seed=0))

    def test_linear_probe_learnability(self, small_stream):
        # each task must be >= 95% separable from raw pixels
        for task in small_stream:
            classes = sorted(task.class_set)
            X = task.train.images.reshape(len(task.train), -1).astype(np.float64)
            Y = np.eye(len(classes))[[classes.index(l) for l in task.train.labels]]
            Xm = X.mean(axis=0)
            Xc = X - Xm
            W = np.linalg.solve(Xc.T @ Xc + 10.0 * np.eye(X.shape[1]), Xc.T @ (Y - Y.mean(0)))
            Xt = task.test.images.reshape(len(task.test), -1) - Xm
            pred = np.asarray(classes)[(Xt @ W).argmax(axis=1)]
            assert (pred == task.test.labels).mean() >= 0.95


class TestSplitClassIncremental:
    def _triple(self, num_classes=6, per_class=10):
        rng = np.random.default_rng(3)
        def split(count, name):
            images = rng.random((count * num_classes, 6, 6, 1)).astype(np.float32)
            labels = np.repeat(np.arange(num_classes), count)
            from forgetnot.task_stream import LabeledDataset
            return LabeledDataset(images, labels, tuple(range(num_classes)), name)
        return split(per_class, "train"), split(3, "val"), split(4, "test")

    def test_canonical_assignment(self):
        stream = split_class_incremental(self._triple(), StreamConfig(num_tasks=3, classes_per_task=2))
        assert [t.class_set for t in stream.tasks] == [(0, 1), (2, 3), (4, 5)]

    def test_reversed_assignment(self):
        cfg = StreamConfig(num_tasks=3, classes_per_task=2, order="reversed")
        stream = split_class_incremental(self._triple(), cfg)
        assert [t.class_set for t in stream.tasks] == [(4, 5), (2, 3), (0, 1)]

    def test_capacity_error(self):
        with pytest.raises(ConfigError):
            split_class_incremental(self._triple(num_classes=5),
                                    StreamConfig(num_tasks=3, classes_per_task=2))

    def test_coverage_no_loss_no_duplicates(self):
        triple = self._triple()
        stream = split_class_incremental(triple, StreamConfig(num_tasks=3, classes_per_task=2))
        total = sum(len(t.train) for t in stream.tasks)
        assert total == len(triple[0])

    def test_missing_val_carved_from_train(self):
        train, _, test = self._triple()
        stream = split_class_incremental((train, None, test),
                                         StreamConfig(num_tasks=3, classes_per_task=2))
        for task in stream.tasks:
            assert len(task.val) >= len(task.class_set)
            assert len(task.train) + len(task.val) == 20


class TestBatches:
    def test_partial_final_batch(self, small_stream):
        ds = small_stream.tasks[0].train.subset(np.arange(10))
        sizes = [len(labels) for _, labels in batches(ds, 4, seed=0)]
        assert sizes == [4, 4, 2]

    def test_seed_determinism(self, small_stream):
        ds = small_stream.tasks[0].train
        run1 = [labels.tolist() for _, labels in batches(ds, 8, seed=5)]
        run2 = [labels.tolist() for _, labels in batches(ds, 8, seed=5)]
        assert run1 == run2

    def test_full_batch_is_permutation(self, small_stream):
        ds = small_stream.tasks[0].train
        (_, labels), = list(batches(ds, len(ds), seed=1))
        assert sorted(labels.tolist()) == sorted(ds.labels.tolist())


def test_union_dataset(small_stream):
    union = union_dataset([t.test for t in small_stream.tasks], "test")
    assert len(union) == sum(len(t.test) for t in small_stream.tasks)
    assert union.class_set == small_stream.cumulative_classes()
