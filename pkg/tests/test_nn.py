import numpy as np
import pytest

from forgetnot import nn

rng = np.random.default_rng(31)


def test_trunc_normal_within_two_sigma():
    vals = nn.trunc_normal((2000,), 0.5, np.random.default_rng(0))
    assert np.abs(vals).max() <= 1.0


def test_module_order_interleaves_params_and_children():
    root = nn.Module()
    root.add_module("child_a", nn.LayerNorm(3))
    root.add_param("tail", np.zeros(4))
    names = [n for n, _ in root.named_parameters()]
    assert names == ["child_a.g", "child_a.b", "tail"]
    index = root.param_index()
    assert index["tail"][0] == 6


def test_flat_roundtrip():
    lin = nn.Linear(3, 2, rng)
    flat = lin.flat_params()
    lin.set_flat_params(np.arange(flat.size, dtype=float))
    assert lin.w[0, 0] == 0.0 and lin.b[-1] == flat.size - 1


def test_layernorm_normalizes_rows():
    ln = nn.LayerNorm(16)
    x = rng.normal(3.0, 2.0, size=(5, 16))
    y = ln.forward(x)
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(y.std(axis=-1), 1.0, atol=1e-3)


def test_dropout_inverted_scaling_and_identity():
    drop = nn.Dropout(0.5)
    x = np.ones((2000,))
    assert drop.forward(x, training=False) is x
    y = drop.forward(x, rng=np.random.default_rng(0), training=True)
    assert set(np.unique(y)).issubset({0.0, 2.0})
    assert y.mean() == pytest.approx(1.0, abs=0.1)
    dy = drop.backward(np.ones_like(y))
    np.testing.assert_array_equal(dy, y)


def test_embedding_accumulates_duplicate_grads():
    emb = nn.Embedding(4, 2, rng)
    out = emb.forward(np.array([1, 1, 3]))
    emb.backward(np.ones_like(out))
    assert emb._grads["table"][1].tolist() == [2.0, 2.0]
    assert emb._grads["table"][0].tolist() == [0.0, 0.0]


def test_softmax_cross_entropy_matches_uniform_closed_form():
    loss, dlogits = nn.softmax_cross_entropy(np.zeros((3, 5)), np.array([0, 1, 2]))
    assert loss == pytest.approx(np.log(5.0))
    np.testing.assert_allclose(dlogits.sum(axis=1), 0.0, atol=1e-12)


def test_adamw_decoupled_weight_decay():
    lin = nn.Linear(1, 1, rng)
    lin.w[...] = 1.0
    lin.b[...] = 0.0
    opt = nn.AdamW(lin, lr=0.1, weight_decay=0.5, betas=(0.9, 0.999))
    lin.zero_grad()          # zero gradient: only decay moves the weight
    opt.step()
    assert lin.w[0, 0] == pytest.approx(1.0 - 0.1 * 0.5)


def test_adamw_first_step_is_signed_lr():
    lin = nn.Linear(1, 1, rng)
    lin.w[...] = 0.0
    lin.b[...] = 0.0
    opt = nn.AdamW(lin, lr=0.01, weight_decay=0.0)
    lin._grads["w"][...] = 5.0
    opt.step()
    # bias-corrected Adam moves by ~lr regardless of gradient scale
    assert lin.w[0, 0] == pytest.approx(-0.01, rel=1e-6)


def test_timestep_embedding_shape_and_range():
    emb = nn.timestep_embedding(np.array([1, 7, 300]), 16)
    assert emb.shape == (3, 16)
    assert np.abs(emb).max() <= 1.0


def test_avgpool_upsample_inverse_grads():
    pool = nn.AvgPool2()
    x = rng.normal(size=(2, 3, 4, 4))
    y = pool.forward(x)
    assert y.shape == (2, 3, 2, 2)
    dx = pool.backward(np.ones_like(y))
    np.testing.assert_allclose(dx, 0.25)
    up = nn.UpsampleNearest2()
    z = up.forward(y)
    assert z.shape == (2, 3, 4, 4)
    dz = up.backward(np.ones_like(z))
    np.testing.assert_allclose(dz, 4.0)
