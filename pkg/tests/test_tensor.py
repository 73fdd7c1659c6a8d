import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from interslice.errors import ContractError, DimensionError, FormatError
from interslice.tensor import (Adam, AdamState, ParamSet, Tensor, adam_step, backward, decode_checkpoint,
                               encode_checkpoint, no_grad, ops)
from interslice.tensor import kernels
from interslice.tensor.gradcheck import REGISTERED_OPS, run_suite

from oracles import bilinear_ref


# -- scalar reference implementations --------------------------------------------------------

def conv_ref(x, w, b, stride, pad):
    C, H, W = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    xp[:, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((cout, Ho, Wo))
    for o in range(cout):
        for i in range(Ho):
            for j in range(Wo):
                s = 0.0 if b is None else b[o]
                for c in range(C):
                    for u in range(k):
                        for v in range(k):
                            s += w[o, c, u, v] * xp[c, i * stride + u, j * stride + v]
                out[o, i, j] = s
    return out


def upsample_ref(img):
    C, H, W = img.shape
    out = np.zeros((C, 2 * H, 2 * W))

    def src(o, n):
        s = max((o + 0.5) / 2 - 0.5, 0.0)
        i0 = min(int(np.floor(s)), n - 1)
        i1 = min(i0 + 1, n - 1)
        return i0, i1, s - i0

    for y in range(2 * H):
        y0, y1, ay = src(y, H)
        for x in range(2 * W):
            x0, x1, ax = src(x, W)
            out[:, y, x] = ((1 - ay) * ((1 - ax) * img[:, y0, x0] + ax * img[:, y0, x1])
                            + ay * ((1 - ax) * img[:, y1, x0] + ax * img[:, y1, x1]))
    return out


def avgpool_ref(img):
    C, H, W = img.shape
    out = np.zeros((C, H // 2, W // 2))
    for y in range(H // 2):
        for x in range(W // 2):
            out[:, y, x] = img[:, 2 * y:2 * y + 2, 2 * x:2 * x + 2].mean(axis=(1, 2))
    return out


# -- conv2d ------------------------------------------------------------------------------------

def test_conv_identity_kernel(rng):
    x = rng.normal(size=(1, 5, 6))
    out = ops.conv2d(x, np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_constant_all_ones():
    x = np.full((1, 6, 6), 0.7)
    out = ops.conv2d(x, np.ones((1, 1, 3, 3)), pad=1).data
    np.testing.assert_allclose(out[0, 1:-1, 1:-1], 9 * 0.7, rtol=0, atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (2, 0)])
def test_conv_matches_loop_oracle(rng, stride, pad):
    x = rng.normal(size=(2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = ops.conv2d(x, w, b, stride=stride, pad=pad).data
    np.testing.assert_allclose(out, conv_ref(x, w, b, stride, pad), rtol=0, atol=1e-12)


def test_conv_shape_errors_name_both_shapes():
    with pytest.raises(DimensionError) as err:
        ops.conv2d(np.zeros((2, 4, 4)), np.zeros((3, 1, 3, 3)))
    assert "(1, 2, 4, 4)" in str(err.value) or "(2, 4, 4)" in str(err.value)
    assert "(3, 1, 3, 3)" in str(err.value)
    with pytest.raises(DimensionError):
        ops.conv2d(np.zeros((1, 4, 4)), np.zeros((1, 1, 2, 2)))


def test_conv_batched_equals_single(rng):
    x = rng.normal(size=(3, 2, 5, 5))
    w = rng.normal(size=(4, 2, 3, 3))
    batched = ops.conv2d(x, w, pad=1).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], ops.conv2d(x[i], w, pad=1).data, atol=1e-12)


# -- warping -------------------------------------------------------------------------------------

def test_grid_sample_zero_flow_identity(rng):
    img = rng.uniform(size=(2, 7, 5))
    out = ops.grid_sample_bilinear(img, np.zeros((2, 7, 5))).data
    assert np.array_equal(out, img)


def test_grid_sample_integer_shift_clamps_border():
    img = np.array([[[10.0, 20.0, 30.0]]])
    flow = np.zeros((2, 1, 3))
    flow[0] = 1.0
    np.testing.assert_array_equal(ops.grid_sample_bilinear(img, flow).data, [[[20.0, 30.0, 30.0]]])


def test_grid_sample_midpoint():
    img = np.array([[[0.0, 1.0]]])
    flow = np.zeros((2, 1, 2))
    flow[0] = 0.5
    assert ops.grid_sample_bilinear(img, flow).data[0, 0, 0] == 0.5


def test_grid_sample_matches_scalar_oracle(rng):
    for _ in range(20):
        img = rng.normal(size=(2, 6, 7))
        flow = rng.uniform(-3, 3, size=(2, 6, 7))
        np.testing.assert_allclose(ops.grid_sample_bilinear(img, flow).data, bilinear_ref(img, flow),
                                   rtol=0, atol=1e-12)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 31))
def test_grid_sample_linear_in_intensity(a, b, seed):
    r = np.random.default_rng(seed)
    i, j = r.normal(size=(2, 1, 5, 6))
    flow = r.uniform(-2, 2, size=(2, 5, 6))
    lhs = ops.grid_sample_bilinear((a * i + b * j)[None], flow).data
    rhs = a * ops.grid_sample_bilinear(i[None], flow).data + b * ops.grid_sample_bilinear(j[None], flow).data
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10)


# -- pooling / upsampling --------------------------------------------------------------------------

def test_avgpool_block_mean():
    out = ops.avgpool2(np.array([[[1.0, 3.0], [5.0, 7.0]]])).data
    np.testing.assert_array_equal(out, [[[4.0]]])


def test_avgpool_odd_extent_rejected():
    with pytest.raises(DimensionError):
        ops.avgpool2(np.zeros((1, 3, 4)))


def test_upsample_constant_preserved():
    out = ops.upsample2(np.full((2, 3, 5), 0.3)).data
    assert out.shape == (2, 6, 10)
    np.testing.assert_allclose(out, 0.3, atol=1e-15)


def test_upsample_then_pool_matches_reference(rng):
    img = rng.normal(size=(2, 4, 5))
    up = ops.upsample2(img).data
    np.testing.assert_allclose(up, upsample_ref(img), atol=1e-12)
    np.testing.assert_allclose(ops.avgpool2(up).data, avgpool_ref(upsample_ref(img)), atol=1e-12)


def test_pool_and_resample_dispatch(rng):
    x = rng.normal(size=(1, 4, 4))
    np.testing.assert_array_equal(ops.pool_and_resample(x, "avgpool2").data, ops.avgpool2(x).data)
    np.testing.assert_array_equal(ops.pool_and_resample(x, "bilinear_upsample2").data, ops.upsample2(x).data)


# -- fully connected / elementwise ----------------------------------------------------------------------

def test_fully_connected_cases(rng):
    x = rng.normal(size=4)
    np.testing.assert_array_equal(ops.fully_connected(x, np.eye(4), np.zeros(4)).data, x)
    b = rng.normal(size=3)
    np.testing.assert_array_equal(ops.fully_connected(x, np.zeros((3, 4)), b).data, b)
    w = rng.normal(size=(3, 4))
    ref = [sum(w[i, j] * x[j] for j in range(4)) + b[i] for i in range(3)]
    np.testing.assert_allclose(ops.fully_connected(x, w, b).data, ref, atol=1e-12)
    with pytest.raises(DimensionError):
        ops.fully_connected(x, np.zeros((3, 5)), b)


def test_elementwise_examples(rng):
    assert ops.sigmoid(Tensor(np.array(0.0))).item() == 0.5
    assert ops.relu(Tensor(np.array(-3.0))).item() == 0.0
    assert ops.leaky_relu(Tensor(np.array(-3.0)), 0.1).item() == pytest.approx(-0.3)
    a = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(ops.elementwise_suite(a, np.ones((3, 4)), "mul").data, a)


def test_sigmoid_strictly_inside_unit_interval():
    out = ops.sigmoid(Tensor(np.array([-1e4, -50.0, 0.0, 50.0, 1e4]))).data
    assert np.all(out > 0) and np.all(out < 1)


def test_log_clamped():
    out = ops.log(Tensor(np.array([0.0, -1.0, 1.0])))
    np.testing.assert_allclose(out.data, [np.log(1e-7), np.log(1e-7), 0.0])


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6))
def test_softmax_sums_to_one(values):
    p = ops.softmax(Tensor(np.array(values)), axis=-1).data
    assert abs(p.sum() - 1.0) < 1e-6


# -- backward / gradients ------------------------------------------------------------------------------

def test_backward_square():
    ps = ParamSet(0, np.float64)
    x = ps.add("x", np.array(3.0))
    assert backward(x * x, ps)["x"] == pytest.approx(6.0)


def test_backward_sigmoid():
    ps = ParamSet(0, np.float64)
    x = ps.add("x", np.array(0.0))
    assert backward(ops.sigmoid(x), ps)["x"] == pytest.approx(0.25)


def test_backward_unreachable_is_zero_and_nonscalar_rejected():
    ps = ParamSet(0, np.float64)
    x = ps.add("x", np.ones(3))
    ps.add("y", np.ones(2))
    grads = backward((x * 2.0).sum(), ps)
    np.testing.assert_array_equal(grads["y"], np.zeros(2))
    with pytest.raises(ContractError):
        backward(x * 2.0, ps)


def test_no_grad_records_nothing():
    ps = ParamSet(0, np.float64)
    x = ps.add("x", np.ones(3))
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad


def test_gradient_suite_all_ops():
    results = run_suite(points=10, seed=0)
    assert set(results) == set(REGISTERED_OPS)
    bad = {k: v for k, v in results.items() if not v < 1e-4}
    assert not bad


# -- Adam --------------------------------------------------------------------------------------------

def test_adam_zero_gradient_no_change():
    ps = ParamSet(0, np.float64)
    ps.add("w", np.array([1.0, -2.0]))
    state = AdamState(lr=0.1)
    adam_step(ps, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(ps["w"].data, [1.0, -2.0])
    assert state.t == 1


def test_adam_first_step_is_sign():
    ps = ParamSet(0, np.float64)
    ps.add("w", np.zeros(3))
    g = np.array([0.5, -3.0, 1e-2])
    adam_step(ps, {"w": g}, AdamState(lr=0.01))
    np.testing.assert_allclose(ps["w"].data, -0.01 * np.sign(g), atol=0.01 * 1e-6)


def test_adam_matches_scalar_reference():
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    ps = ParamSet(0, np.float64)
    ps.add("w", np.array(2.0))
    opt = Adam(ps, lr)
    w, m, v = 2.0, 0.0, 0.0
    for t in range(1, 4):
        g = 2 * (w - 0.5)  # d/dw (w - 0.5)^2
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        loss = (ps["w"] - 0.5) * (ps["w"] - 0.5)
        opt.step(backward(loss, ps))
        assert ps["w"].item() == pytest.approx(w, abs=1e-14)
    assert opt.state.t == 3


# -- params and checkpoints ----------------------------------------------------------------------------

def test_paramset_init_deterministic_and_ordered():
    a, b = ParamSet(7), ParamSet(7)
    for ps in (a, b):
        ps.conv("z.conv", 4, 2, 3)
        ps.linear("a.fc", 3, 5)
    assert a.names() == sorted(a.names())
    for name in a:
        assert np.array_equal(a[name].data, b[name].data)
        bound = 1 / np.sqrt({"z.conv.w": 18, "z.conv.b": 18, "a.fc.w": 5, "a.fc.b": 5}[name])
        assert np.abs(a[name].data).max() <= bound
    c = ParamSet(7)
    c.linear("a.fc", 3, 5)
    assert np.array_equal(c["a.fc.w"].data, a["a.fc.w"].data)  # independent of other parameters
    with pytest.raises(KeyError):
        a.linear("a.fc", 3, 5)


def test_checkpoint_round_trip_bit_exact(rng):
    arrays = {"b": rng.normal(size=(2, 3)).astype(np.float32), "a.w": rng.normal(size=(4,)).astype(np.float32),
              "s": np.array(1.5, dtype=np.float32)}
    back = decode_checkpoint(encode_checkpoint(arrays))
    assert sorted(back) == sorted(arrays)
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes()


def test_checkpoint_errors_report_offsets(rng):
    buf = encode_checkpoint({"w": np.ones((2, 2), np.float32)})
    with pytest.raises(FormatError) as err:
        decode_checkpoint(b"XSCK1" + buf[5:])
    assert err.value.offset == 0
    with pytest.raises(FormatError) as err:
        decode_checkpoint(buf[:-3])
    assert "offset" in str(err.value)
    bad = bytearray(buf)
    bad[-4:] = np.array([np.inf], "<f4").tobytes()
    with pytest.raises(FormatError):
        decode_checkpoint(bytes(bad))
    with pytest.raises(FormatError):
        decode_checkpoint(buf + b"\0")


# -- compiled and pure-Python kernels agree ------------------------------------------------------------------

@pytest.mark.skipif("cython" not in kernels.backends(), reason="compiled kernels not built")
def test_backends_agree(rng):
    impl = kernels.backends()
    py, cy = impl["numpy"], impl["cython"]
    x = rng.normal(size=(2, 3, 7, 6))
    for k, s, p in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 2, 2)]:
        np.testing.assert_allclose(py.im2col(x, k, s, p), cy.im2col(x, k, s, p), atol=1e-13)
        cols = py.im2col(x, k, s, p)
        np.testing.assert_allclose(py.col2im(cols, x.shape, k, s, p), cy.col2im(cols, x.shape, k, s, p), atol=1e-12)
    flow = rng.uniform(-3, 3, size=(2, 2, 7, 6))
    np.testing.assert_allclose(py.grid_sample_fwd(x, flow), cy.grid_sample_fwd(x, flow), atol=1e-13)
    g = rng.normal(size=x.shape)
    for a, b in zip(py.grid_sample_bwd(x, flow, g), cy.grid_sample_bwd(x, flow, g)):
        np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_allclose(py.upsample2_fwd(x), cy.upsample2_fwd(x), atol=1e-13)
    g2 = rng.normal(size=(2, 3, 14, 12))
    np.testing.assert_allclose(py.upsample2_bwd(g2), cy.upsample2_bwd(g2), atol=1e-12)


def test_pure_python_fallback_selected_by_env():
    code = "from interslice.tensor import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, INTERSLICE_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
