import json

import numpy as np
import pytest

from forgetnot.continual_trainer import (DdpmOptions, DiagnosticsConfig,
                                         OptimizerConfig, TrainConfig,
                                         balanced_labels, make_mixed_batches,
                                         run_sequence)
from forgetnot.errors import ConfigError
from forgetnot.replay_buffer import ReplayBuffer
from forgetnot.task_stream import StreamConfig, make_synthetic_stream
from forgetnot.vit_classifier import ViTConfig

rng = np.random.default_rng(23)


def fast_config(method="finetune", seed=0, **kw):
    defaults = dict(method=method, lam=1e4, epochs_classifier=3, epochs_ddpm=2,
                    samples_per_task=16, batch_size=16, seed=seed,
                    optimizer=OptimizerConfig(lr=1e-3), ddpm_lr=2e-3,
                    fisher_samples_per_class=4, head_warmup_epochs=2)
    defaults.update(kw)
    return TrainConfig(**defaults)


def fast_vit():
    return ViTConfig(patch_size=4, depth=1, heads=2, hidden_dim=16, mlp_dim=32,
                     num_classes=2, image_size=(12, 12, 1))


def fast_ddpm():
    return DdpmOptions(schedule="linear", timesteps=6, channels=(4, 8), emb_dim=8,
                       time_dim=8, batch_size=16)


@pytest.fixture(scope="module")
def mini_stream():
    return make_synthetic_stream(StreamConfig(num_tasks=3, classes_per_task=2, seed=1,
                                              image_size=(12, 12, 1), train_per_class=16,
                                              val_per_class=4, test_per_class=8))


class TestTrainConfig:
    def test_lambda_forced_zero_for_non_ewc(self):
        for method in ("ddpm_only", "finetune", "joint"):
            assert TrainConfig(method=method, lam=50.0).lam == 0.0

    def test_replay_flags(self):
        assert TrainConfig(method="full").uses_replay
        assert not TrainConfig(method="ewc_only").uses_replay
        assert TrainConfig(method="ewc_only").uses_ewc
        assert not TrainConfig(method="finetune").uses_ewc

    def test_unknown_method(self):
        with pytest.raises(ConfigError):
            TrainConfig(method="magic")

    def test_budget_bytes(self):
        assert TrainConfig(replay_budget_mb=1.0).budget_bytes == 2 ** 20
        assert TrainConfig(replay_budget_mb=None).budget_bytes is None


class TestBalancedLabels:
    def test_even(self):
        labels = balanced_labels([3, 5], 256)
        assert np.bincount(labels, minlength=6)[3] == 128
        assert np.bincount(labels, minlength=6)[5] == 128

    def test_remainder(self):
        labels = balanced_labels([0, 1, 2], 8)
        counts = np.bincount(labels, minlength=3)
        assert sorted(counts.tolist()) == [2, 3, 3]


class TestMixedBatches:
    def _buffer(self, classes, per_class=20):
        buf = ReplayBuffer()
        for c in classes:
            buf.add_task_samples(rng.random((per_class, 12, 12, 1)).astype(np.float32),
                                 np.full(per_class, c), 1)
        return buf

    def test_one_to_one_split(self, mini_stream):
        real = mini_stream.tasks[1].train
        buf = self._buffer([0, 1])
        batches = list(make_mixed_batches(real, buf, 64, (1, 1),
                                          np.random.default_rng(0)))
        imgs, labels = batches[0]
        assert len(imgs) == 64
        replay_mask = np.isin(labels, [0, 1])
        assert replay_mask.sum() == 32

    def test_empty_buffer_all_real(self, mini_stream):
        real = mini_stream.tasks[0].train
        batches = list(make_mixed_batches(real, ReplayBuffer(), 16, (1, 1),
                                          np.random.default_rng(0)))
        assert all(len(im) <= 16 for im, _ in batches)
        assert sum(len(im) for im, _ in batches) == len(real)

    def test_three_to_one_split(self, mini_stream):
        real = mini_stream.tasks[1].train
        buf = self._buffer([0, 1])
        imgs, labels = next(iter(make_mixed_batches(real, buf, 64, (3, 1),
                                                    np.random.default_rng(0))))
        replay = np.isin(labels, [0, 1]).sum()
        # the task itself has only 32 real examples: one 32-real chunk + replay
        assert replay in (10, 11, 16)

    def test_epoch_covers_real_data_once(self, mini_stream):
        real = mini_stream.tasks[1].train
        buf = self._buffer([0, 1])
        total_real = 0
        for imgs, labels in make_mixed_batches(real, buf, 16, (1, 1),
                                               np.random.default_rng(0)):
            total_real += np.isin(labels, sorted(real.class_set)).sum()
        assert total_real == len(real)


class TestRunSequence:
    def test_matrix_protocol_shape(self, mini_stream):
        res = run_sequence(mini_stream, fast_config("finetune"), vit_config=fast_vit(),
                           ddpm_opts=fast_ddpm(), diag=DiagnosticsConfig(enabled=False))
        m = res.record.accuracy_matrix
        for j in range(1, 4):
            for t in range(j, 4):
                assert m.defined(j, t)
        assert not m.defined(2, 1)
        assert not m.defined(3, 1) and not m.defined(3, 2)

    def test_determinism_identical_records(self, mini_stream):
        kw = dict(vit_config=fast_vit(), ddpm_opts=fast_ddpm(),
                  diag=DiagnosticsConfig(enabled=False))
        a = run_sequence(mini_stream, fast_config("ewc_only", seed=3), **kw)
        b = run_sequence(mini_stream, fast_config("ewc_only", seed=3), **kw)
        da, db = a.record.to_json_dict(), b.record.to_json_dict()
        assert json.dumps(da, sort_keys=True) == json.dumps(db, sort_keys=True)

    def test_stage_skipping_finetune(self, mini_stream):
        res = run_sequence(mini_stream, fast_config("finetune"), vit_config=fast_vit(),
                           ddpm_opts=fast_ddpm(), diag=DiagnosticsConfig(enabled=False))
        r = res.record
        assert r.ddpm_traces == {}
        assert r.fisher_summaries == []
        assert len(res.buffer) == 0
        assert len(res.anchors) == 0
        assert all(e["penalty"] == 0.0 for tr in r.loss_traces.values() for e in tr)

    def test_first_task_has_no_penalty(self, mini_stream):
        res = run_sequence(mini_stream, fast_config("ewc_only"), vit_config=fast_vit(),
                           ddpm_opts=fast_ddpm(), diag=DiagnosticsConfig(enabled=False))
        assert all(e["penalty"] == 0.0 for e in res.record.loss_traces[1])

    def test_full_method_buffer_and_anchors(self, mini_stream):
        res = run_sequence(mini_stream, fast_config("full"), vit_config=fast_vit(),
                           ddpm_opts=fast_ddpm(), diag=DiagnosticsConfig(enabled=False))
        assert len(res.registry) == 3
        assert len(res.anchors) == 3
        counts = res.buffer.per_class_counts
        assert set(counts) == set(range(6))
        # every task's classes balanced within the task
        for task in (0, 2, 4):
            assert counts[task] == counts[task + 1]

    def test_objective_decomposition_readdable(self, mini_stream):
        res = run_sequence(mini_stream, fast_config("ewc_only", lam=1e4),
                           vit_config=fast_vit(), ddpm_opts=fast_ddpm(),
                           diag=DiagnosticsConfig(enabled=False))
        for trace in res.record.loss_traces.values():
            for entry in trace:
                lhs = entry["total_loss"]
                rhs = entry["cls_loss"] + entry["lambda"] * entry["penalty"]
                assert lhs == pytest.approx(rhs, abs=1e-6)

    def test_joint_fills_final_column_only(self, mini_stream):
        res = run_sequence(mini_stream, fast_config("joint"), vit_config=fast_vit(),
                           ddpm_opts=fast_ddpm(), diag=DiagnosticsConfig(enabled=False))
        m = res.record.accuracy_matrix
        assert all(m.defined(j, 3) for j in range(1, 4))
        assert not any(m.defined(j, t) for j in range(1, 4) for t in range(j, 3))
        assert res.record.metrics["forgetting"] == 0.0

    def test_exemplar_free_no_real_bytes_replayed(self, mini_stream):
        """No raw task-j image may appear in any later training batch."""
        res = run_sequence(mini_stream, fast_config("full"), vit_config=fast_vit(),
                           ddpm_opts=fast_ddpm(), diag=DiagnosticsConfig(enabled=False))
        real_hashes = set()
        for task in mini_stream.tasks:
            for img in task.train.images:
                real_hashes.add(img.tobytes())
        for item in res.buffer.items:
            assert item.image.tobytes() not in real_hashes

    def test_measure_fwt_records_pretask_and_baseline(self, mini_stream):
        res = run_sequence(mini_stream, fast_config("finetune", measure_fwt=True),
                           vit_config=fast_vit(), ddpm_opts=fast_ddpm(),
                           diag=DiagnosticsConfig(enabled=False))
        m = res.record.accuracy_matrix
        assert m.defined(2, 1) and m.defined(3, 2)
        assert len(res.record.random_baseline) == 3
        assert res.record.metrics["fwt"] is not None
        assert res.record.metrics["bwt"] is not None

    def test_bound_terms_for_replay_methods(self, mini_stream):
        res = run_sequence(mini_stream, fast_config("full"), vit_config=fast_vit(),
                           ddpm_opts=fast_ddpm(),
                           diag=DiagnosticsConfig(kl_samples=16))
        terms = res.record.bound_terms
        assert [t.task_id for t in terms] == [1, 2, 3]
        assert all(t.kl_estimate >= 0 for t in terms)
        assert all(t.drift is not None and t.drift >= 0 for t in terms)
        assert len(res.record.pinsker_checks) == 3

    def test_unified_generator_mode(self, mini_stream):
        res = run_sequence(mini_stream, fast_config("full", generator_mode="unified"),
                           vit_config=fast_vit(), ddpm_opts=fast_ddpm(),
                           diag=DiagnosticsConfig(enabled=False))
        assert len(res.registry) == 1
        assert res.registry.unified.task_emb is not None
        assert len(res.buffer) == 3 * 16
