import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sceneseg.autodiff import (
    OPS, BNState, batchnorm, conv2d, dense, finite_difference_check, global_pool, relu, sigmoid,
)
from sceneseg.errors import NonFiniteError, ShapeError, StateError

from conftest import naive_conv2d


def test_conv_example_values():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    w = np.ones((1, 1, 3, 3))
    out = conv2d(x, w, np.zeros(1), 1).value
    # interior pixel (1, 1) sums the 3x3 block 0..10
    assert out[0, 0, 1, 1] == 45
    # corner sees a 2x2 block after zero padding
    assert out[0, 0, 0, 0] == 0 + 1 + 4 + 5


def test_conv_rejects_bad_shapes():
    x = np.zeros((1, 3, 5, 5))
    with pytest.raises(ShapeError):
        conv2d(x, np.zeros((4, 2, 3, 3)), np.zeros(4), 1)
    with pytest.raises(ShapeError):
        conv2d(x, np.zeros((4, 3, 3, 3)), np.zeros(3), 1)
    with pytest.raises(ShapeError):
        conv2d(x, np.zeros((4, 3, 3, 3)), np.zeros(4), 0)
    with pytest.raises(ShapeError):
        conv2d(x[0], np.zeros((4, 3, 3, 3)), np.zeros(4), 1)


def test_conv_input_grad_off(rng):
    x = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
    pair = conv2d(x, rng.standard_normal((4, 3, 3, 3)).astype(np.float32), np.zeros(4, np.float32), 1,
                  input_grad=False)
    dx, dw, db = pair.backward(np.ones_like(pair.value))
    assert dx is None and dw.shape == (4, 3, 3, 3) and db.tolist() == [50.0] * 4


@pytest.mark.parametrize("k", [1, 3, 5])
def test_conv_matches_naive(rng, k):
    for _ in range(5):
        n, c, o = rng.integers(1, 4, 3)
        h, w = rng.integers(k, 8, 2)
        x = rng.standard_normal((n, c, h, w))
        wt = rng.standard_normal((o, c, k, k))
        b = rng.standard_normal(o)
        got = conv2d(x, wt, b, k // 2).value
        np.testing.assert_allclose(got, naive_conv2d(x, wt, b, k // 2), atol=1e-10)


def test_relu_and_sigmoid():
    x = np.array([-2.0, 0.0, 3.0])
    r = relu(x)
    assert r.value.tolist() == [0, 0, 3]
    assert r.backward(np.ones(3))[0].tolist() == [0, 0, 1]
    s = sigmoid(np.array([0.0, -1000.0, 1000.0]))
    assert s.value.tolist() == [0.5, 0.0, 1.0]
    assert np.all(np.isfinite(s.backward(np.ones(3))[0]))


def test_batchnorm_train_normalizes_and_updates_state(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 2 + 5
    pair = batchnorm(x, np.ones(3), np.zeros(3))
    y = pair.value
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-7)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)
    st_ = pair.state
    np.testing.assert_allclose(st_.mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(st_.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))


def test_batchnorm_eval_uses_running_state():
    x = np.full((1, 2, 2, 2), 3.0)
    state = BNState(np.array([1.0, 3.0]), np.array([4.0, 1.0]))
    y = batchnorm(x, np.ones(2), np.zeros(2), state, "eval").value
    assert y[0, 0, 0, 0] == pytest.approx(1.0, abs=1e-5)
    assert y[0, 1, 0, 0] == pytest.approx(0.0)
    with pytest.raises(StateError):
        batchnorm(x, np.ones(2), np.zeros(2), None, "eval")


def test_batchnorm_does_not_mutate_running(rng):
    state = BNState(np.zeros(3), np.ones(3))
    batchnorm(rng.standard_normal((2, 3, 4, 4)), np.ones(3), np.zeros(3), state)
    assert state.mean.tolist() == [0, 0, 0] and state.var.tolist() == [1, 1, 1]


def test_global_pool_values():
    x = np.arange(8, dtype=np.float64).reshape(1, 2, 2, 2)
    assert global_pool(x, "avg").value.ravel().tolist() == [1.5, 5.5]
    mx = global_pool(x, "max")
    assert mx.value.ravel().tolist() == [3, 7]
    (dx,) = mx.backward(np.ones((1, 2, 1, 1)))
    assert dx.sum() == 2 and dx[0, 0, 1, 1] == 1


def test_dense_vector_and_batch(rng):
    w = rng.standard_normal((3, 4))
    b = rng.standard_normal(3)
    v = rng.standard_normal(4)
    np.testing.assert_allclose(dense(v, w, b).value, w @ v + b)
    np.testing.assert_allclose(dense(np.stack([v, v]), w, b).value[1], w @ v + b)
    with pytest.raises(ShapeError):
        dense(np.zeros(5), w, b)


# ------------------------------------------------------------ gradients


def _sample(op, rng):
    n = lambda *s: rng.standard_normal(s)  # noqa: E731
    if op == "conv2d":
        return {"x": n(2, 3, 5, 6), "weights": n(4, 3, 3, 3), "bias": n(4)}
    if op in ("relu", "sigmoid"):
        return {"x": n(2, 3, 4, 4)}
    if op == "batchnorm":
        return {"x": n(3, 4, 3, 3) * 2 + 1, "gamma": n(4), "beta": n(4)}
    if op.startswith("global_pool"):
        return {"x": n(2, 3, 4, 5)}
    if op == "dense":
        return {"x": n(3, 6), "weights": n(5, 6), "bias": n(5)}
    raise KeyError(op)


@pytest.mark.parametrize("op", ["conv2d", "relu", "sigmoid", "batchnorm", "global_pool_avg",
                                "global_pool_max", "dense"])
@pytest.mark.parametrize("seed", range(5))
def test_gradients(op, seed):
    rng = np.random.default_rng(seed)
    assert finite_difference_check(op, _sample(op, rng), 1e-6, seed=seed) < 1e-4


def test_fd_check_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_difference_check("relu", {"x": np.ones((1, 1, 2, 2))}, 1e-2)
    with pytest.raises(KeyError):
        finite_difference_check("nope", {})


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fd_check_reports_nonfinite():
    from sceneseg.autodiff import GradPair, register_op

    register_op("_sqrt", lambda x: GradPair(np.sqrt(x), lambda d: (d * 0.5 / np.sqrt(x),)), ["x"])
    try:
        with pytest.raises(NonFiniteError, match=r"x\[0\]"):
            finite_difference_check("_sqrt", {"x": np.array([0.0, 1.0])}, 1e-5)
    finally:
        OPS.pop("_sqrt")


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(3, 7), st.integers(3, 7),
       st.sampled_from([1, 3]), st.integers(0, 2**31 - 1))
def test_conv_keeps_spatial_size(n, c, h, w, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, c, h, w)).astype(np.float32)
    out = conv2d(x, rng.standard_normal((5, c, k, k)).astype(np.float32), np.zeros(5, np.float32), k // 2)
    assert out.value.shape == (n, 5, h, w)
    assert out.value.dtype == np.float32


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_conv_backward_is_adjoint(seed):
    # <conv(x), u> is linear in x, so <dx, x> must equal <conv(x) - b, u>
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, 4, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    pair = conv2d(x, w, np.zeros(3), 1)
    u = rng.standard_normal(pair.value.shape)
    dx, dw, _ = pair.backward(u)
    assert np.sum(dx * x) == pytest.approx(np.sum(pair.value * u), rel=1e-9)
    assert np.sum(dw * w) == pytest.approx(np.sum(pair.value * u), rel=1e-9)
