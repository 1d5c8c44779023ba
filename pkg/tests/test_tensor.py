import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aasn import tensor as T
from aasn.errors import CheckpointError, ContractError, DimensionError
from aasn.gradcheck import check_instance
from aasn.tensor import Tensor


def conv_reference(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for y in range(ho):
                for xx in range(wo):
                    patch = xp[i, :, y * stride:y * stride + k, xx * stride:xx * stride + k]
                    out[i, o, y, xx] = (patch * w[o]).sum() + (b[o] if b is not None else 0.0)
    return out


def test_conv_sum_of_ones():
    y = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    assert y.shape == (1, 1, 1, 1)
    assert y.data.item() == 9.0


def test_conv_pointwise_scale_shift():
    x = Tensor(np.array([[[[1.0, 0.0], [0.0, 1.0]]]]))
    y = T.conv2d(x, Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.ones(1)))
    np.testing.assert_array_equal(y.data[0, 0], [[3.0, 1.0], [1.0, 3.0]])


@given(
    n=st.integers(1, 2), cin=st.integers(1, 3), cout=st.integers(1, 3),
    k=st.sampled_from([1, 2, 3]), stride=st.integers(1, 3), pad=st.integers(0, 2),
    h=st.integers(3, 7), w=st.integers(3, 7), seed=st.integers(0, 2**16),
)
def test_conv_matches_nested_loops(n, cin, cout, k, stride, pad, h, w, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, cin, h, w))
    wt = rng.normal(size=(cout, cin, k, k))
    b = rng.normal(size=cout)
    y = T.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, pad)
    np.testing.assert_allclose(y.data, conv_reference(x, wt, b, stride, pad), atol=1e-5)


def test_conv_output_size_and_errors():
    x = Tensor(np.zeros((2, 3, 8, 8), np.float32))
    assert T.conv2d(x, Tensor(np.zeros((4, 3, 3, 3), np.float32)), stride=2, pad=1).shape == (2, 4, 4, 4)
    with pytest.raises(DimensionError, match="axis 1"):
        T.conv2d(x, Tensor(np.zeros((4, 2, 3, 3))))
    with pytest.raises(DimensionError):
        T.conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), Tensor(np.zeros(3)))


def test_conv_gradcheck_spec_shape(rng):
    x, w, b = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    errs = check_instance(lambda a, c, d: T.conv2d(a, c, d, 1, 1), [x, w, b], (32, 64), rng, max_coords=64)
    assert errs[32] < 1e-3 and errs[64] < 1e-6


def test_batchnorm_already_normalised(rng):
    x = rng.normal(size=(4, 3, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    st_ = T.BatchNormState.fresh(3, np.float64)
    y = T.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), st_, "train")
    assert np.abs(y.data - x).max() < 1e-4


def test_batchnorm_zero_scale_gives_beta(rng):
    beta = np.array([0.5, -1.0])
    y = T.batchnorm2d(Tensor(rng.normal(size=(2, 2, 3, 3))), Tensor(np.zeros(2)), Tensor(beta),
                      T.BatchNormState.fresh(2, np.float64))
    np.testing.assert_array_equal(y.data, np.broadcast_to(beta[None, :, None, None], y.shape))


def test_batchnorm_running_stats_and_eval(rng):
    x = rng.normal(2.0, 3.0, size=(4, 2, 4, 4))
    st_ = T.BatchNormState.fresh(2, np.float64)
    T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), st_, "train")
    m = x.transpose(1, 0, 2, 3).reshape(2, -1)
    np.testing.assert_allclose(st_.running_mean, 0.1 * m.mean(axis=1))
    np.testing.assert_allclose(st_.running_var, 0.9 + 0.1 * m.var(axis=1, ddof=1))
    y = T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), st_, "eval")
    ref = (x - st_.running_mean[None, :, None, None]) / np.sqrt(st_.running_var[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(y.data, ref, rtol=1e-12)
    with pytest.raises(DimensionError):
        T.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), st_)


def test_small_op_examples():
    a = Tensor(np.zeros((1, 8, 2, 2)))
    assert T.concat_channels([a, a]).shape == (1, 16, 2, 2)
    assert T.sigmoid(Tensor(np.zeros((1, 1, 1, 1)))).data.item() == 0.5
    with pytest.raises(DimensionError):
        T.concat_channels([a, Tensor(np.zeros((1, 8, 2, 3)))])
    with pytest.raises(DimensionError):
        T.avgpool2x2(Tensor(np.zeros((1, 1, 3, 4))))


def test_maxpool_routes_ties_to_first_index():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    T.backward(T.sum_all(T.maxpool2x2(x)))
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_upsample_keeps_constants_and_shape():
    x = Tensor(np.full((1, 2, 3, 5), 0.7))
    y = T.upsample_bilinear2x(x)
    assert y.shape == (1, 2, 6, 10)
    np.testing.assert_allclose(y.data, 0.7)


@given(h=st.integers(1, 9), w=st.integers(1, 9), seed=st.integers(0, 1000))
def test_grid_sample_identity(h, w, seed):
    x = np.random.default_rng(seed).normal(size=(2, 3, h, w)).astype(np.float32)
    y = T.grid_sample_bilinear(Tensor(x), T.identity_grid(h, w))
    assert np.abs(y.data - x).max() < 1e-6


def test_grid_sample_midpoint_and_padding():
    x = Tensor(np.array([[[[0.0, 1.0]]]]))
    mid = np.zeros((1, 2, 1, 1))
    assert T.grid_sample_bilinear(x, mid).data.item() == pytest.approx(0.5)
    outside = np.full((1, 2, 1, 1), 3.0)
    assert T.grid_sample_bilinear(x, outside).data.item() == 0.0
    with pytest.raises(DimensionError):
        T.grid_sample_bilinear(x, np.zeros((1, 3, 1, 1)))


def test_grid_sample_translation_by_one_cell(rng):
    x = rng.normal(size=(1, 2, 4, 6))
    g = T.identity_grid(4, 6, np.float64)
    g[:, 0] += 2.0 / (6 - 1)  # one pixel to the right
    y = T.grid_sample_bilinear(Tensor(x), g).data
    np.testing.assert_allclose(y[..., :-1], x[..., 1:], atol=1e-12)
    np.testing.assert_array_equal(y[..., -1], 0.0)


def test_backward_examples(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    T.backward(T.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones(x.shape))
    y = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    T.backward(T.mul(T.sum_all(T.square(y)), 0.5))
    np.testing.assert_allclose(y.grad, y.data)
    with pytest.raises(ContractError):
        T.backward(T.square(y))


def test_backward_accumulates_and_is_linear(rng):
    x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
    f1 = lambda: T.sum_all(T.relu(x))
    f2 = lambda: T.mean_all(T.square(T.avgpool2x2(x)))
    T.backward(f1())
    T.backward(f2())
    separate = x.grad.copy()
    x.zero_grad()
    T.backward(T.add(f1(), f2()))
    np.testing.assert_allclose(x.grad, separate, rtol=1e-12)


def test_tape_order_is_topological(rng):
    a = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
    b = T.relu(a)
    c = T.add(b, T.square(b))
    tape = T.Tape.from_output(T.sum_all(c))
    pos = {id(t): i for i, t in enumerate(tape.tensors)}
    for t in tape.tensors:
        if t._node is not None:
            for inp in t._node.inputs:
                assert pos[id(inp)] < pos[id(t)]
    assert len(pos) == len(tape.tensors)


def test_no_grad_and_debug():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with T.no_grad():
        assert not T.relu(x).requires_grad
    T.set_debug(True)
    try:
        with pytest.raises(FloatingPointError):
            T.mul(Tensor(np.array([np.inf])), 1.0)
    finally:
        T.set_debug(False)


def test_adam_zero_gradient_is_fixed_point():
    p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    T.adam_step(p, {"w": np.zeros(2)}, T.AdamState(), lr=0.1)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adam_descends_and_converges():
    w = Tensor(np.array([1.0]), requires_grad=True)
    T.adam_step({"w": w}, {"w": 2 * w.data}, T.AdamState(), lr=0.1)
    assert w.data[0] < 1.0

    a = np.diag([1.0, 10.0])
    p = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = T.Adam({"p": p}, lr=0.05)
    for _ in range(200):
        p.grad = a @ p.data
        opt.step()
    assert np.linalg.norm(a @ p.data) < 1e-3


def test_adam_missing_grad():
    with pytest.raises(ContractError, match="'w'"):
        T.adam_step({"w": Tensor(np.ones(1))}, {}, T.AdamState())


def _fragment_bytes(tensors, header="h"):
    buf = io.BytesIO()
    T.write_fragment(buf, tensors, header)
    return buf.getvalue()


def test_fragment_roundtrip_bitwise(rng):
    t = {"a": rng.normal(size=(2, 3, 4, 5)).astype(np.float32), "b.c": rng.normal(size=7).astype(np.float32)}
    raw = _fragment_bytes(t, "[x]\ny = 1")
    header, back = T.read_fragment(io.BytesIO(raw))
    assert header == "[x]\ny = 1"
    assert back["a"].tobytes() == t["a"].tobytes()
    assert back["b.c"].shape == (1, 1, 1, 7)
    assert _fragment_bytes({k: v for k, v in back.items()}, header)[:4] == b"AASN"


def test_fragment_errors():
    raw = _fragment_bytes({"a": np.ones((2, 2), np.float32)})
    with pytest.raises(CheckpointError, match="truncated"):
        T.read_fragment(io.BytesIO(raw[:-3]))
    with pytest.raises(CheckpointError, match="magic"):
        T.read_fragment(io.BytesIO(b"XXXX" + raw[4:]))
    bad_version = raw[:4] + (99).to_bytes(4, "little") + raw[8:]
    with pytest.raises(CheckpointError, match="version"):
        T.read_fragment(io.BytesIO(bad_version))
    with pytest.raises(CheckpointError, match="trailing"):
        T.read_fragment(io.BytesIO(raw + b"\0"))


def test_float64_shadow_mode_preserves_dtype(rng):
    x = Tensor(rng.normal(size=(1, 2, 4, 4)))
    w = Tensor(rng.normal(size=(2, 2, 3, 3)))
    assert T.conv2d(x, w, None, 1, 1).dtype == np.float64
    assert T.upsample_bilinear2x(x.astype(np.float32)).dtype == np.float32
