import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from atomtune.tensor import (ConvGeometry, ShapeError, as_tensor, contract, conv2d,
                             conv2d_input_grad, conv2d_weight_grad, kron, read_atf, write_atf)
from oracles import contract_loops, conv2d_loops, numeric_grad


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def test_identity_kernel(rng):
    x = rng.standard_normal((1, 5, 7)).astype(np.float32)
    y = conv2d(x, np.ones((1, 1, 1, 1), np.float32))
    np.testing.assert_array_equal(y, x)


def test_channel_sum(rng):
    x = rng.standard_normal((2, 4, 4)).astype(np.float32)
    y = conv2d(x, np.ones((1, 2, 1, 1), np.float32))
    np.testing.assert_allclose(y[0], x[0] + x[1], atol=1e-6)


def test_conv_matches_loop_oracle(rng):
    x = rng.standard_normal((3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    expected = conv2d_loops(x, w, stride=1, padding=1)
    np.testing.assert_allclose(conv2d(x, w, ConvGeometry(1, 1)), expected, atol=1e-6)


@pytest.mark.parametrize("stride,padding,k", [(2, 0, 3), (2, 1, 3), (1, 2, 5), (3, 1, 1)])
def test_conv_geometries_match_oracle(rng, stride, padding, k):
    x = rng.standard_normal((2, 9, 7)).astype(np.float32)
    w = rng.standard_normal((3, 2, k, k)).astype(np.float32)
    y = conv2d(x, w, ConvGeometry(stride, padding))
    np.testing.assert_allclose(y, conv2d_loops(x, w, stride, padding), atol=1e-5)


def test_conv_batched_equals_per_sample(rng):
    x = rng.standard_normal((3, 2, 6, 6)).astype(np.float32)
    w = rng.standard_normal((4, 2, 3, 3)).astype(np.float32)
    g = ConvGeometry(2, 1)
    yb = conv2d(x, w, g)
    for i in range(3):
        np.testing.assert_array_equal(yb[i], conv2d(x[i], w, g))


def test_conv_is_deterministic(rng):
    x = rng.standard_normal((2, 3, 10, 10)).astype(np.float32)
    w = rng.standard_normal((5, 3, 3, 3)).astype(np.float32)
    assert conv2d(x, w).tobytes() == conv2d(x, w).tobytes()


def test_conv_errors():
    x = np.zeros((2, 4, 4), np.float32)
    with pytest.raises(ShapeError):
        conv2d(x, np.zeros((1, 3, 1, 1), np.float32))
    with pytest.raises(ShapeError):
        conv2d(x, np.zeros((1, 2, 5, 5), np.float32))


def test_geometry_validation():
    with pytest.raises(ValueError):
        ConvGeometry(stride=0)
    with pytest.raises(ValueError):
        ConvGeometry(padding=-1)
    assert ConvGeometry(2, 1).out_size(8, 3) == 4


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), k=st.sampled_from([1, 3]), stride=st.sampled_from([1, 2]))
def test_conv_linear_in_weight(seed, k, stride):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 7, 7)).astype(np.float32)
    w1 = rng.standard_normal((2, 3, k, k)).astype(np.float32)
    w2 = rng.standard_normal((2, 3, k, k)).astype(np.float32)
    g = ConvGeometry(stride, k // 2)
    lhs = conv2d(x, w1 + w2, g)
    rhs = conv2d(x, w1, g) + conv2d(x, w2, g)
    assert np.max(np.abs(lhs - rhs)) <= 1e-5 * max(1.0, np.max(np.abs(lhs)))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16))
def test_conv_linear_in_input(seed):
    rng = np.random.default_rng(seed)
    x1 = rng.standard_normal((2, 6, 6)).astype(np.float32)
    x2 = rng.standard_normal((2, 6, 6)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    lhs = conv2d(x1 + x2, w)
    rhs = conv2d(x1, w) + conv2d(x2, w)
    assert np.max(np.abs(lhs - rhs)) <= 1e-5 * max(1.0, np.max(np.abs(lhs)))


@pytest.mark.parametrize("k", [1, 3, 5])
def test_delta_kernel_reproduces_channel(rng, k):
    x = rng.standard_normal((3, 9, 9)).astype(np.float32)
    w = np.zeros((1, 3, k, k), np.float32)
    w[0, 1, k // 2, k // 2] = 1.0
    y = conv2d(x, w, ConvGeometry(1, (k - 1) // 2))
    np.testing.assert_array_equal(y[0], x[1])


def test_conv_gradients_match_finite_differences(rng):
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    g = ConvGeometry(2, 1)
    target = rng.standard_normal(conv2d(x, w, g).shape)

    def loss():
        return 0.5 * np.sum((conv2d(x, w, g) - target) ** 2)

    gy = conv2d(x, w, g) - target
    np.testing.assert_allclose(conv2d_weight_grad(x, gy, 3, g), numeric_grad(loss, w), rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(conv2d_input_grad(gy, w, x.shape, g), numeric_grad(loss, x), rtol=1e-5, atol=1e-6)


def test_float64_inputs_stay_float64(rng):
    x = rng.standard_normal((1, 4, 4))
    assert conv2d(x, np.ones((1, 1, 1, 1))).dtype == np.float64
    assert conv2d(x.astype(np.float32), np.ones((1, 1, 1, 1), np.float32)).dtype == np.float32


# --- contract -------------------------------------------------------------------

def test_contract_scalar_scale():
    r = contract(np.full((1, 1, 1), 2.0, np.float32), np.ones((1, 3, 3), np.float32))
    np.testing.assert_array_equal(r, 2 * np.ones((1, 1, 3, 3)))


def test_contract_identity_slab(rng):
    b = rng.standard_normal((4, 3, 3)).astype(np.float32)
    eye = np.eye(4, dtype=np.float32).reshape(4, 1, 4)
    np.testing.assert_array_equal(contract(eye, b), b.reshape(4, 1, 3, 3))


def test_contract_matches_loops(rng):
    a = rng.standard_normal((2, 3, 4)).astype(np.float32)
    b = rng.standard_normal((4, 5, 5)).astype(np.float32)
    np.testing.assert_allclose(contract(a, b), contract_loops(a, b), atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(p=st.integers(1, 6), q=st.integers(1, 6), r=st.integers(1, 6),
       s=st.integers(1, 6), t=st.integers(1, 6), seed=st.integers(0, 2**16))
def test_contract_property(p, q, r, s, t, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((p, q, r)).astype(np.float32)
    b = rng.standard_normal((r, s, t)).astype(np.float32)
    np.testing.assert_allclose(contract(a, b), contract_loops(a, b), atol=1e-5)


def test_contract_axis_mismatch():
    with pytest.raises(ShapeError):
        contract(np.ones((2, 3)), np.ones((4, 2)))
    with pytest.raises(ShapeError):
        contract(np.ones((2, 3)), np.ones((3, 2)), axes=([0, 1], [0]))


# --- kron -----------------------------------------------------------------------

def test_kron_identity_block_diagonal(rng):
    b = rng.standard_normal((2, 3)).astype(np.float32)
    r = kron(np.eye(2, dtype=np.float32), b)
    np.testing.assert_array_equal(r[:2, :3], b)
    np.testing.assert_array_equal(r[2:, 3:], b)
    assert not r[:2, 3:].any() and not r[2:, :3].any()


def test_kron_scalar(rng):
    b = rng.standard_normal((3, 2)).astype(np.float32)
    np.testing.assert_array_equal(kron(np.array([[2.0]], np.float32), b), 2 * b)


def test_kron_definition_expansion():
    a = np.array([[1, 2], [3, 4]], np.float32)
    b = np.array([[0, 1], [1, 0]], np.float32)
    expected = np.array([[0, 1, 0, 2],
                         [1, 0, 2, 0],
                         [0, 3, 0, 4],
                         [3, 0, 4, 0]], np.float32)
    np.testing.assert_array_equal(kron(a, b), expected)


def test_kron_rank_errors():
    with pytest.raises(ShapeError):
        kron(np.ones(3), np.ones((2, 2)))


@settings(max_examples=30, deadline=None)
@given(p=st.integers(1, 4), q=st.integers(1, 4), r=st.integers(1, 4), s=st.integers(1, 4),
       seed=st.integers(0, 2**16))
def test_kron_rearranged_rank_one(p, q, r, s, seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((p, q)).astype(np.float32)
    b = rng.standard_normal((r, s)).astype(np.float32)
    w = kron(a, b).astype(np.float64)
    # rows are vectorized blocks; a Kronecker product makes this matrix rank one
    rows = w.reshape(p, r, q, s).transpose(0, 2, 1, 3).reshape(p * q, r * s)
    minors = rows[:, None, :, None] * rows[None, :, None, :] - rows[:, None, None, :] * rows[None, :, :, None]
    assert np.max(np.abs(minors)) <= 1e-5 * max(1.0, np.max(np.abs(rows)) ** 2)


# --- ATF1 -------------------------------------------------------------------------

def test_atf_round_trip(rng, tmp_path):
    t = rng.standard_normal((2, 3, 4)).astype(np.float32)
    write_atf(tmp_path / "t.atf", t)
    back = read_atf(tmp_path / "t.atf")
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, t)


def test_atf_layout():
    buf = io.BytesIO()
    write_atf(buf, np.array([[1.0, 2.0, 3.0]], np.float32))
    raw = buf.getvalue()
    assert raw[:4] == b"ATF1"
    assert raw[4] == 2
    assert raw[5:13] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert np.frombuffer(raw[13:], "<f4").tolist() == [1.0, 2.0, 3.0]
    assert len(raw) == 4 + 1 + 8 + 12


def test_atf_rejects_bad_input(tmp_path):
    with pytest.raises(ValueError):
        read_atf(b"NOPE")
    with pytest.raises(ValueError):
        read_atf(b"ATF1" + bytes([1]) + (4).to_bytes(4, "little") + b"\0" * 8)
    with pytest.raises(ShapeError):
        write_atf(tmp_path / "x.atf", np.float32(1.0))


def test_as_tensor_validates():
    assert as_tensor([[1, 2]]).dtype == np.float32
    with pytest.raises(ShapeError):
        as_tensor(np.zeros((0, 3)))
