import numpy as np
import pytest

from forgetnot import nn
from forgetnot.errors import ContractError
from forgetnot.ewc import (AnchorSet, FisherAnchor, estimate_fisher, ewc_gradient,
                           ewc_penalty, fisher_from_gradients)
from forgetnot.task_stream import LabeledDataset

from conftest import relative_error

rng = np.random.default_rng(7)


def anchor(fisher, point, task_id=1):
    return FisherAnchor(fisher=np.asarray(fisher, dtype=float),
                        anchor=np.asarray(point, dtype=float),
                        sample_count=1, task_id=task_id)


class TestFisherAccumulation:
    def test_hand_computed_mean_of_squares(self):
        # two per-example gradients on a 1-parameter model
        f = fisher_from_gradients([[0.3], [-0.1]])
        assert f[0] == pytest.approx(0.05, abs=1e-15)

    def test_quadratic_homogeneity(self):
        grads = rng.normal(size=(6, 4))
        np.testing.assert_allclose(fisher_from_gradients(2 * grads),
                                   4 * fisher_from_gradients(grads), atol=1e-12)

    def test_zero_gradients_zero_fisher(self):
        assert (fisher_from_gradients(np.zeros((5, 3))) == 0).all()


class TestEstimateFisher:
    def _dataset(self, n_per_class=6):
        images = rng.random((2 * n_per_class, 4, 4, 1)).astype(np.float32)
        labels = np.repeat([0, 1], n_per_class)
        return LabeledDataset(images, labels, (0, 1), "train")

    def _model(self):
        from forgetnot.vit_classifier import ViTClassifier, ViTConfig
        cfg = ViTConfig(patch_size=2, depth=1, heads=2, hidden_dim=8, mlp_dim=16,
                        num_classes=2, image_size=(4, 4, 1))
        model = ViTClassifier(cfg, seed=0)
        model.head_out[...] = rng.normal(0, 0.3, model.head_out.shape)
        return model

    def test_matches_manual_per_example_squares(self):
        model = self._model()
        ds = self._dataset(3)
        got = estimate_fisher(model, ds, samples_per_class=3,
                              rng=np.random.default_rng(0), task_id=2)
        manual = np.zeros(model.num_params())
        for i in range(len(ds)):
            _, g = model.loss_and_grad(ds.images[i:i + 1], model.rows_for(ds.labels[i:i + 1]))
            manual += g * g
        manual /= len(ds)
        np.testing.assert_allclose(got.fisher, manual, atol=1e-12)
        assert got.task_id == 2
        assert got.sample_count == 6
        np.testing.assert_array_equal(got.anchor, model.flat_params())

    def test_subsampling_warns_and_caps(self, caplog):
        model = self._model()
        ds = self._dataset(2)
        with caplog.at_level("WARNING"):
            got = estimate_fisher(model, ds, samples_per_class=10,
                                  rng=np.random.default_rng(0))
        assert got.sample_count == 4
        assert any("using all" in r.message for r in caplog.records)

    def test_nonnegative_and_summary(self):
        model = self._model()
        got = estimate_fisher(model, self._dataset(2), 2, np.random.default_rng(0))
        assert (got.fisher >= 0).all()
        s = got.summary()
        assert set(s) == {"task_id", "dim", "sample_count", "min", "mean", "max", "sparsity"}


class TestPenalty:
    def test_zero_at_anchor(self):
        a = anchor([1.0, 2.0], [0.3, -0.4])
        assert ewc_penalty([0.3, -0.4], [a]) == 0.0
        assert (ewc_gradient([0.3, -0.4], [a]) == 0.0).all()

    def test_hand_value(self):
        a = anchor([1.0, 2.0], [0.0, 0.0])
        assert ewc_penalty([0.5, -1.0], [a]) == pytest.approx(2.25, abs=1e-15)

    def test_zero_fisher_zero_penalty(self):
        a = anchor([0.0, 0.0], [5.0, -5.0])
        assert ewc_penalty(rng.normal(size=2), [a]) == 0.0

    def test_gradient_hand_value(self):
        a = anchor([1.0, 2.0], [0.0, 0.0])
        np.testing.assert_allclose(ewc_gradient([0.5, -1.0], [a]), [1.0, -4.0], atol=1e-15)

    def test_gradient_matches_finite_difference_tightly(self):
        d = 20
        anchors = [anchor(np.abs(rng.normal(size=d)), rng.normal(size=d), 1),
                   anchor(np.abs(rng.normal(size=d)), rng.normal(size=d), 2)]
        theta = rng.normal(size=d)
        analytic = ewc_gradient(theta, anchors)
        eps = 1e-3
        numeric = np.zeros(d)
        for i in range(d):
            tp, tm = theta.copy(), theta.copy()
            tp[i] += eps
            tm[i] -= eps
            numeric[i] = (ewc_penalty(tp, anchors) - ewc_penalty(tm, anchors)) / (2 * eps)
        assert relative_error(analytic, numeric) < 1e-8

    def test_head_growth_prefix_rule(self):
        a = anchor([1.0, 1.0], [0.0, 0.0])
        grown = np.array([0.5, 0.5, 9.0, 9.0])   # two new coordinates
        assert ewc_penalty(grown, [a]) == pytest.approx(0.5)
        grad = ewc_gradient(grown, [a])
        assert (grad[2:] == 0).all()

    def test_shrunk_theta_is_contract_error(self):
        a = anchor([1.0, 1.0, 1.0], [0.0, 0.0, 0.0])
        with pytest.raises(ContractError):
            ewc_penalty([0.1], [a])


class TestAnchorSet:
    def test_sum_over_tasks_accumulates(self):
        s = AnchorSet("sum_over_tasks")
        s.add(anchor([1.0], [0.0], 1))
        s.add(anchor([1.0], [1.0], 2))
        assert len(s) == 2
        assert ewc_penalty([2.0], s) == pytest.approx(4.0 + 1.0)

    def test_latest_only_replaces(self):
        s = AnchorSet("latest_only")
        s.add(anchor([1.0], [0.0], 1))
        s.add(anchor([1.0], [1.0], 2))
        assert len(s) == 1
        assert s.anchors[0].task_id == 2


class TestMonotoneRestraint:
    def test_final_distance_weakly_decreases_in_lambda(self):
        """Minimizing ||theta-u||^2 + lam * F (theta-theta*)^2 to convergence."""
        u = np.array([2.0, -1.0])
        fisher = np.array([1.0, 0.5])
        theta_star = np.zeros(2)
        dists = []
        for lam in (10.0, 50.0, 100.0):
            # closed-form comparison point
            expected = u / (1.0 + lam * fisher)
            theta = u.copy()
            for _ in range(20000):
                grad = 2 * (theta - u) + lam * 2 * fisher * theta
                theta -= 1e-3 / (1 + lam) * grad
            np.testing.assert_allclose(theta, expected, atol=1e-6)
            dists.append(np.linalg.norm(theta - theta_star))
        assert dists[0] >= dists[1] >= dists[2]
