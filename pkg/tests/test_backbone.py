import numpy as np
import pytest

from modil.backbone import (build_backbone, checkpoint_bytes, checkpoint_from_bytes, flatten_size,
                            load_checkpoint, param_count, save_checkpoint)
from modil.numerics import ShapeError


def _frames(rng, n=4, length=64):
    return rng.standard_normal((n, 2, length)).astype(np.float32)


@pytest.mark.parametrize("length,feat,k,kind", [(256, 128, 16, "linear"), (64, 32, 3, "linear"),
                                                 (128, 16, 5, "cosine")])
def test_param_count_closed_form(length, feat, k, kind):
    m = build_backbone(length, feat, kind, seed=0)
    m.expand_head(k)
    assert m.n_params() == param_count(length, feat, k, kind)
    # hand count for the default channels 2-32-48-64-64
    conv = (2 * 3 + 1) * 32 + (32 * 3 + 1) * 48 + (48 * 3 + 1) * 64 + (64 * 3 + 1) * 64
    dense = (64 * length // 16 + 1) * feat
    head = (feat + 1) * k if kind == "linear" else feat * k + 1
    assert m.n_params() == conv + dense + head


def test_flatten_size():
    assert flatten_size(256) == 64 * 16
    assert flatten_size(64, (2, 8, 8)) == 8 * 16


def test_shapes():
    rng = np.random.default_rng(0)
    m = build_backbone(64, 32, seed=1).expand_head(3)
    x = _frames(rng, 5)
    assert m.forward(x).shape == (5, 3)
    assert m.extract(x).shape == (5, 32)
    assert m.last_features.shape == (5, 32)
    assert m.forward(x[0]).shape == (1, 3)


def test_bad_input_shape_is_reported():
    m = build_backbone(64, 32).expand_head(2)
    with pytest.raises(ShapeError):
        m.forward(np.zeros((2, 2, 32), np.float32))
    with pytest.raises(ValueError):
        build_backbone(100, 32)
    with pytest.raises(ValueError):
        build_backbone(64, 32, head_kind="mlp")
    with pytest.raises(ValueError):
        m.expand_head(0)


def test_same_seed_same_weights():
    a, b = build_backbone(64, 32, seed=3), build_backbone(64, 32, seed=3)
    c = build_backbone(64, 32, seed=4)
    pa, pb, pc = (list(p for _, _, p in m.parameters()) for m in (a, b, c))
    assert all(np.array_equal(x, y) for x, y in zip(pa, pb))
    assert not all(np.array_equal(x, y) for x, y in zip(pa, pc))


@pytest.mark.parametrize("kind", ["linear", "cosine"])
def test_expansion_keeps_old_logits(kind):
    rng = np.random.default_rng(0)
    m = build_backbone(64, 32, kind, seed=0).expand_head(2)
    # give the head non-trivial weights first
    for p in m.head.params.values():
        p[...] = rng.standard_normal(p.shape)
    x = _frames(rng)
    before = m.forward(x)
    m.expand_head(3)
    after = m.forward(x)
    assert after.shape == (4, 5)
    np.testing.assert_array_equal(after[:, :2], before)


def test_zero_init_new_rows_give_zero_logits():
    rng = np.random.default_rng(1)
    m = build_backbone(64, 32, "linear", seed=0).expand_head(2)
    m.head.params["weight"][...] = rng.standard_normal((2, 32))
    m.expand_head(2)
    np.testing.assert_array_equal(m.forward(_frames(rng))[:, 2:], 0.0)


def test_cosine_new_rows_are_unit_norm():
    m = build_backbone(64, 32, "cosine", seed=0).expand_head(4)
    np.testing.assert_allclose(np.linalg.norm(m.head.params["weight"], axis=1), 1.0, rtol=1e-6)


def test_clone_frozen_is_independent():
    rng = np.random.default_rng(2)
    m = build_backbone(64, 32, seed=0).expand_head(2)
    x = _frames(rng)
    twin = m.clone_frozen()
    ref = twin.forward(x).copy()
    for _, _, p in m.parameters():
        p += 1.0
    m.expand_head(1)
    np.testing.assert_array_equal(twin.forward(x), ref)
    assert twin.n_classes == 2
    with pytest.raises(RuntimeError):
        twin.forward(x, train=True)


def test_backward_accumulates_and_zero_grad_clears():
    rng = np.random.default_rng(3)
    m = build_backbone(64, 16, seed=0).expand_head(2)
    x = _frames(rng)
    m.forward(x, train=True)
    dx = m.backward(np.ones((4, 2), np.float32), input_grad=True)
    assert dx.shape == x.shape
    assert any(np.any(layer.grads[k]) for layer in m.all_layers for k in layer.grads)
    m.zero_grad()
    assert not any(np.any(layer.grads[k]) for layer in m.all_layers for k in layer.grads)


@pytest.mark.parametrize("kind", ["linear", "cosine"])
def test_checkpoint_round_trip(tmp_path, kind):
    rng = np.random.default_rng(4)
    m = build_backbone(64, 32, kind, seed=5).expand_head(3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.descriptor() == m.descriptor()
    x = _frames(rng)
    np.testing.assert_array_equal(back.forward(x), m.forward(x))
    assert checkpoint_bytes(back) == checkpoint_bytes(m)


def test_checkpoint_rejects_corruption():
    buf = checkpoint_bytes(build_backbone(64, 16).expand_head(2))
    with pytest.raises(ValueError, match="magic"):
        checkpoint_from_bytes(b"X" + buf[1:])
    with pytest.raises(ValueError):
        checkpoint_from_bytes(buf[:-4])
    with pytest.raises(ValueError):
        checkpoint_from_bytes(buf + b"\0\0\0\0")
