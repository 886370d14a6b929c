import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rehearsal_diffusion import autodiff as ad


def naive_conv1d(x, k, stride, pad):
    # direct sliding-window sum, one output element at a time
    x = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    b, c_in, length = x.shape
    c_out, _, w = k.shape
    l_out = (length - w) // stride + 1
    out = np.zeros((b, c_out, l_out))
    for n in range(b):
        for o in range(c_out):
            for t in range(l_out):
                out[n, o, t] = np.sum(x[n, :, t * stride:t * stride + w] * k[o])
    return out


def naive_conv_transpose1d(x, k, stride, pad):
    # scatter every input sample into the output
    b, c_in, length = x.shape
    _, c_out, w = k.shape
    full = np.zeros((b, c_out, (length - 1) * stride + w))
    for n in range(b):
        for i in range(c_in):
            for t in range(length):
                full[n, :, t * stride:t * stride + w] += x[n, i, t] * k[i]
    return full[:, :, pad:full.shape[2] - pad]


def test_conv1d_zero_input():
    k = np.random.default_rng(0).normal(size=(3, 2, 3))
    out = ad.conv1d(np.zeros((2, 2, 7)), k, padding=1)
    assert np.all(out.data == 0)


def test_conv1d_identity_kernel():
    x = np.arange(5.0).reshape(1, 1, 5)
    out = ad.conv1d(x, np.ones((1, 1, 1)))
    np.testing.assert_array_equal(out.data, x.astype(out.data.dtype))


def test_conv1d_small_example():
    out = ad.conv1d(np.array([[[1.0, 2.0, 3.0]]]), np.array([[[1.0, 1.0]]]))
    np.testing.assert_array_equal(out.data.ravel(), [3.0, 5.0])


CONV_GRID = [(n, w, s, p) for n in (1, 2, 5, 8, 13) for w in (1, 2, 3, 5) for s in (1, 2, 3) for p in (0, 1, 2)
             if w <= n + 2 * p]


@pytest.mark.parametrize("length,width,stride,pad", CONV_GRID)
def test_conv1d_matches_loop_oracle(length, width, stride, pad):
    rng = np.random.default_rng(length * 100 + width * 10 + stride + pad)
    x = rng.uniform(-1, 1, size=(2, 3, length))
    k = rng.uniform(-1, 1, size=(4, 3, width))
    with ad.precision(np.float64):
        out = ad.conv1d(x, k, stride=stride, padding=pad)
    assert out.shape[2] == (length + 2 * pad - width) // stride + 1
    np.testing.assert_allclose(out.data, naive_conv1d(x, k, stride, pad), atol=1e-12)


@pytest.mark.parametrize("length,stride,pad,width", [(4, 2, 1, 4), (3, 1, 0, 3), (5, 2, 0, 3), (2, 3, 1, 5)])
def test_conv_transpose_matches_scatter_oracle(length, stride, pad, width):
    rng = np.random.default_rng(length)
    x = rng.uniform(-1, 1, size=(2, 3, length))
    k = rng.uniform(-1, 1, size=(3, 2, width))
    with ad.precision(np.float64):
        out = ad.conv_transpose1d(x, k, stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, naive_conv_transpose1d(x, k, stride, pad), atol=1e-12)


def test_conv_transpose_doubles_length():
    out = ad.conv_transpose1d(np.zeros((1, 2, 6)), np.zeros((2, 3, 4)), stride=2, padding=1)
    assert out.shape == (1, 3, 12)


def test_conv1d_shape_errors_name_dimension():
    with pytest.raises(ad.ShapeError, match="C_in"):
        ad.conv1d(np.zeros((1, 2, 5)), np.zeros((1, 3, 3)))
    with pytest.raises(ad.ShapeError, match="W=9"):
        ad.conv1d(np.zeros((1, 1, 5)), np.zeros((1, 1, 9)))


def test_backward_linear_and_quadratic():
    p = ad.parameter(np.array([1.0, -2.0]))
    np.testing.assert_array_equal(ad.backward(ad.sum_all(p), [p])[0], [1.0, 1.0])
    with ad.precision(np.float64):
        p = ad.parameter(np.array([1.0, -2.0]))
        loss = ad.mul(ad.sum_all(ad.mul(p, p)), 0.5)
        np.testing.assert_allclose(ad.backward(loss, [p])[0], [1.0, -2.0])


def test_backward_unreached_and_nonscalar():
    p = ad.parameter(np.ones(3))
    q = ad.parameter(np.ones((2, 2)))
    g = ad.backward(ad.sum_all(p), {"p": p, "q": q})
    assert np.all(g["q"] == 0) and g["q"].shape == (2, 2)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.mul(p, 2.0), [p])


def _rand(shape, seed):
    return np.random.default_rng(seed).uniform(-1, 1, size=shape)


# one forward per primitive, each reduced to a scalar with a fixed random projection
PRIMITIVES = {
    "add": (lambda L: ad.add(L["a"], L["b"]), {"a": (2, 3), "b": (3,)}),
    "mul": (lambda L: ad.mul(L["a"], L["b"]), {"a": (2, 3), "b": (2, 1)}),
    "silu": (lambda L: ad.silu(L["a"]), {"a": (4, 5)}),
    "dense": (lambda L: ad.dense(L["x"], L["w"], L["b"]), {"x": (3, 4), "w": (2, 4), "b": (2,)}),
    "matmul": (lambda L: ad.matmul(L["a"], L["b"]), {"a": (3, 4), "b": (4, 2)}),
    "concat": (lambda L: ad.concat([L["a"], L["b"]], axis=1), {"a": (2, 2, 3), "b": (2, 1, 3)}),
    "conv1d": (lambda L: ad.conv1d(L["x"], L["k"], L["b"], stride=2, padding=1),
               {"x": (2, 3, 7), "k": (2, 3, 3), "b": (2,)}),
    "conv_transpose1d": (lambda L: ad.conv_transpose1d(L["x"], L["k"], L["b"], stride=2, padding=1),
                         {"x": (2, 3, 4), "k": (3, 2, 4), "b": (2,)}),
    "group_norm": (lambda L: ad.group_norm(L["x"], 2, L["g"], L["b"]), {"x": (2, 4, 5), "g": (4,), "b": (4,)}),
    "transpose": (lambda L: ad.transpose(L["a"], (2, 0, 1)), {"a": (2, 3, 4)}),
    "reshape": (lambda L: ad.reshape(L["a"], (6, 2)), {"a": (3, 4)}),
    "pad_slice": (lambda L: ad.slice_axis(ad.pad_axis(L["a"], 1, 2, 1), 1, 1, 5), {"a": (2, 4)}),
}


@pytest.mark.parametrize("op", sorted(PRIMITIVES))
@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_primitive_gradients(op, seed):
    fn, shapes = PRIMITIVES[op]
    params = {k: _rand(s, seed + i) for i, (k, s) in enumerate(shapes.items())}
    with ad.precision(np.float64):
        proj = None

        def loss(L):
            nonlocal proj
            out = fn(L)
            if proj is None:
                proj = _rand(out.shape, seed + 99)
            return ad.sum_all(ad.mul(out, proj))

        report = ad.gradcheck(loss, params, tol=1e-4)
    assert report.passed, report.max_rel_error


def test_mean_square_gradient():
    params = {"a": _rand((3, 4), 1), "b": _rand((3, 4), 2)}
    report = ad.gradcheck(lambda L: ad.mean_square(L["a"], L["b"]), params)
    assert report.passed


def test_linear_layer_gradcheck_tight():
    params = {"x": _rand((4, 3), 0), "w": _rand((2, 3), 1), "b": _rand((2,), 2)}
    report = ad.gradcheck(lambda L: ad.sum_all(ad.dense(L["x"], L["w"], L["b"])), params, tol=1e-6)
    assert report.passed, report.worst


def test_three_layer_net_gradcheck():
    params = {"w1": _rand((8, 5), 3), "b1": _rand((8,), 4), "w2": _rand((8, 8), 5),
              "b2": _rand((8,), 6), "w3": _rand((1, 8), 7), "b3": _rand((1,), 8)}
    x = _rand((6, 5), 9)

    def net(L):
        h = ad.silu(ad.dense(x, L["w1"], L["b1"]))
        h = ad.silu(ad.dense(h, L["w2"], L["b2"]))
        return ad.mean_square(ad.dense(h, L["w3"], L["b3"]))

    report = ad.gradcheck(net, params, tol=1e-4)
    assert report.passed, report.max_rel_error


def test_gradcheck_catches_broken_conv_backward(monkeypatch):
    real = ad._col2im
    monkeypatch.setattr(ad, "_col2im", lambda *a: 2.0 * real(*a))
    params = {"x": _rand((1, 2, 6), 0), "k": _rand((3, 2, 3), 1)}
    report = ad.gradcheck(lambda L: ad.sum_all(ad.conv1d(L["x"], L["k"], padding=1)), params)
    assert not report.passed
    assert report.max_rel_error["k"] < 1e-4  # the kernel path is untouched


def test_adam_single_step_hand_value():
    new, state = ad.adam_step({"p": np.array(0.0)}, {"p": np.array(1.0)}, ad.AdamState(), lr=0.1)
    # m_hat = v_hat = 1 after bias correction, so the step is lr / (1 + eps)
    assert abs(float(new["p"]) + 0.1) < 1e-6
    assert state.step == 1


@settings(max_examples=20, deadline=None)
@given(n_steps=st.integers(1, 30), seed=st.integers(0, 1000))
def test_adam_zero_gradients_are_identity(n_steps, seed):
    p = {"w": _rand((3, 2), seed)}
    state = ad.AdamState()
    cur = p
    for _ in range(n_steps):
        cur, state = ad.adam_step(cur, {"w": np.zeros((3, 2))}, state, lr=3e-4)
    np.testing.assert_array_equal(cur["w"], p["w"])
    assert state.step == n_steps


def test_adam_rejects_nonfinite_gradient():
    with pytest.raises(FloatingPointError, match="'bad'"):
        ad.adam_step({"ok": np.zeros(2), "bad": np.zeros(2)},
                     {"ok": np.zeros(2), "bad": np.array([0.0, np.nan])}, ad.AdamState(), 1e-3)


def test_adam_leaves_params_without_grads():
    p = {"a": np.ones(2), "frozen": np.ones(2)}
    new, _ = ad.adam_step(p, {"a": np.ones(2)}, ad.AdamState(), 0.1)
    assert new["frozen"] is p["frozen"]
    assert np.all(new["a"] < 1)


def test_ops_are_deterministic():
    x, k = _rand((2, 3, 9), 0), _rand((4, 3, 5), 1)
    a = ad.group_norm(ad.conv1d(x, k, padding=2), 2, np.ones(4), np.zeros(4)).data
    b = ad.group_norm(ad.conv1d(x, k, padding=2), 2, np.ones(4), np.zeros(4)).data
    assert a.tobytes() == b.tobytes()


def test_float_modes():
    assert ad.conv1d(np.ones((1, 1, 3)), np.ones((1, 1, 1))).data.dtype == np.float32
    with ad.precision(np.float64):
        assert ad.conv1d(np.ones((1, 1, 3)), np.ones((1, 1, 1))).data.dtype == np.float64
    assert ad.get_dtype() == np.float32
