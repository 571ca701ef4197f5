import numpy as np
import pytest

from sceneseg import segnet
from sceneseg.autodiff import finite_difference_check
from sceneseg.errors import ConfigError, InputError, ShapeError, StateError
from sceneseg.segnet import ModelParams, forward, init_params, segment_scene


def _trained(params, rng, size=16):
    out = forward(rng.standard_normal((2, params.bands, size, size)).astype(np.float32), params)
    params.running = out.state
    return params


def test_init_deterministic_and_seeded():
    a, b, c = init_params(4, 8), init_params(4, 8), init_params(5, 8)
    for k in a.tensors:
        assert a.tensors[k].tobytes() == b.tensors[k].tobytes()
    assert not np.array_equal(a.tensors["conv1.weight"], c.tensors["conv1.weight"])


def test_init_shapes():
    p = init_params(0, 8)
    assert p.tensors["conv6.weight"].shape == (8, 64, 1, 1)
    assert p.layer_geometry() == [(64, 3, 3)] * 5 + [(8, 1, 1)]
    assert p.tensors["attn.fc1.weight"].shape == (8, 64)
    assert init_params(0, 3, 16).tensors["attn.fc2.weight"].shape == (64, 4)
    assert not p.trained
    with pytest.raises(ConfigError):
        init_params(0, 1)
    with pytest.raises(ConfigError):
        init_params(0, 8, 5)


def test_forward_shape_and_state(rng):
    p = init_params(0, 8)
    out = forward(rng.standard_normal((2, 3, 64, 64)).astype(np.float32), p)
    assert out.value.shape == (2, 8, 64, 64) and out.value.dtype == np.float32
    assert len(out.state) == len(p.running) and all(s is not None for s in out.state)
    dx, grads = out.backward(np.ones_like(out.value))
    assert set(grads) == set(p.tensors)
    assert all(grads[k].shape == p.tensors[k].shape for k in p.tensors)
    assert dx.shape == (2, 3, 64, 64)


def test_forward_errors(rng):
    p = init_params(0, 4)
    with pytest.raises(StateError):
        forward(np.zeros((1, 3, 8, 8), np.float32), p, "eval")
    with pytest.raises(ShapeError):
        forward(np.zeros((1, 4, 8, 8), np.float32), p)


def test_attention_gate_range(rng):
    p = init_params(1, 4)
    x = rng.standard_normal((2, 64, 5, 5))
    out = segnet.channel_attention(x, p).value
    ratio = out / x
    assert np.all((ratio > 0) & (ratio < 1))


def test_attention_zero_mlp_halves():
    p = init_params(1, 4)
    for k in p.tensors:
        if k.startswith("attn"):
            p.tensors[k] = np.zeros_like(p.tensors[k])
    x = np.random.default_rng(0).standard_normal((1, 64, 3, 3))
    np.testing.assert_allclose(segnet.channel_attention(x, p).value, x / 2)
    with pytest.raises(ShapeError):
        segnet.channel_attention(x[:, :32], p)


@pytest.mark.parametrize("seed", range(5))
def test_attention_gradient(seed):
    rng = np.random.default_rng(seed)
    pt = {"x": rng.standard_normal((2, 64, 3, 3)), "w1": rng.standard_normal((8, 64)) * 0.3,
          "b1": rng.standard_normal(8), "w2": rng.standard_normal((64, 8)) * 0.3, "b2": rng.standard_normal(64)}
    assert finite_difference_check("channel_attention", pt, 1e-6, seed=seed) < 1e-4


def test_tile_offsets():
    assert segnet.tile_offsets(130, 128) == [0, 2]
    assert segnet.tile_offsets(128, 128) == [0]
    assert segnet.tile_offsets(300, 100) == [0, 100, 200]
    with pytest.raises(InputError):
        segnet.tile_offsets(100, 128)


def test_segment_scene_shapes(rng):
    p = _trained(init_params(0, 4), rng)
    seg = segment_scene(rng.standard_normal((3, 20, 20)).astype(np.float32), p, (16, 16))
    assert seg.labels.shape == (20, 20) and seg.K == 4
    assert segment_scene(np.zeros((3, 16, 16), np.float32), p, (16, 16)).labels.shape == (16, 16)
    with pytest.raises(ShapeError):
        segment_scene(np.zeros((2, 16, 16), np.float32), p, (16, 16))


def test_constant_scene_single_cluster(rng):
    from sceneseg.sceneio import scene_from_array

    # zero padding breaks the symmetry near tile borders; five 3x3 convs see
    # 5 pixels, so everything further in must agree
    p = _trained(init_params(2, 6), rng)
    seg = segment_scene(scene_from_array(np.full((3, 24, 24), 0.7)), p, (24, 24))
    assert len(np.unique(seg.labels[5:-5, 5:-5])) == 1


def test_tiles_match_whole_forward(rng):
    p = _trained(init_params(3, 4), rng)
    scene = rng.standard_normal((3, 16, 16)).astype(np.float32)
    whole = forward(scene[None], p, "eval").value[0].argmax(0)
    np.testing.assert_array_equal(segment_scene(scene, p, (16, 16)).labels, whole)


def test_copy_is_deep():
    p = init_params(0, 3)
    q = p.copy()
    q.tensors["conv1.bias"][0] = 5
    assert p.tensors["conv1.bias"][0] == 0
    assert isinstance(q, ModelParams)
