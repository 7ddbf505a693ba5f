import numpy as np
import pytest

from forgetnot.task_stream import StreamConfig, make_synthetic_stream
from forgetnot.vit_classifier import ViTClassifier, ViTConfig


@pytest.fixture(scope="session")
def tiny_vit_config():
    return ViTConfig(patch_size=2, depth=1, heads=2, hidden_dim=8, mlp_dim=16,
                     num_classes=3, image_size=(4, 4, 1))


@pytest.fixture()
def tiny_vit(tiny_vit_config):
    return ViTClassifier(tiny_vit_config, seed=1)


@pytest.fixture(scope="session")
def small_stream():
    cfg = StreamConfig(num_tasks=3, classes_per_task=2, seed=0, image_size=(12, 12, 1),
                       train_per_class=32, val_per_class=8, test_per_class=16)
    return make_synthetic_stream(cfg)


def finite_difference_grad(get_loss, model, coords=None, eps=1e-5):
    """Central-difference gradient of a scalar loss over flat parameters."""
    theta0 = model.flat_params()
    if coords is None:
        coords = range(theta0.size)
    grad = {}
    for i in coords:
        for sign in (+1, -1):
            theta = theta0.copy()
            theta[i] += sign * eps
            model.set_flat_params(theta)
            loss = get_loss()
            if sign > 0:
                plus = loss
            else:
                minus = loss
        grad[i] = (plus - minus) / (2 * eps)
    model.set_flat_params(theta0)
    idx = np.fromiter(grad.keys(), dtype=np.int64)
    return idx, np.asarray([grad[i] for i in idx])


def relative_error(analytic, numeric):
    denom = max(np.linalg.norm(numeric), 1e-300)
    return np.linalg.norm(analytic - numeric) / denom
