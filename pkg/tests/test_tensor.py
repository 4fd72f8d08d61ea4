import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facegen import tensor as T


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def test_zeros():
    np.testing.assert_array_equal(T.zeros([2, 2]), [[0.0, 0.0], [0.0, 0.0]])
    np.testing.assert_array_equal(T.zeros([1]), [0.0])
    assert T.zeros([3]).dtype == np.float64


@pytest.mark.parametrize("shape", [[], [0], [2, -1]])
def test_zeros_rejects_bad_shapes(shape):
    with pytest.raises(T.TensorError):
        T.zeros(shape)


def test_randn_zero_variance_and_determinism():
    np.testing.assert_array_equal(T.randn([4], 0, 0, 99), np.zeros(4))
    a, b = T.randn([4], 0, 1, 42), T.randn([4], 0, 1, 42)
    assert a.tobytes() == b.tobytes()
    assert T.randn([4], 0, 1, 43).tobytes() != a.tobytes()


def test_randn_sample_mean():
    x = T.randn([10_000], 0.0, 1.0, 5)
    assert abs(x.mean()) <= 0.05


def test_randn_rejects_negative_stddev():
    with pytest.raises(T.TensorError):
        T.randn([2], 0, -1, 0)


def test_axpy_norms_examples():
    a = np.array([1.0, 0.0])
    b = np.array([0.0, 1.0])
    assert T.axpy_norms(a, a).diff_l2_sq == 0.0
    r = T.axpy_norms(a, b)
    assert r.diff_l2_sq == 2.0
    assert r.dot == 0.0
    assert r.sum == 2.0


def test_axpy_norms_matches_naive_loop(gen):
    a, b = gen.normal(size=1000), gen.normal(size=1000)
    diff = dot = s = 0.0
    for x, y in zip(a.tolist(), b.tolist()):
        diff += (x - y) ** 2
        dot += x * y
        s += x + y
    r = T.axpy_norms(a, b)
    assert r.diff_l2_sq == pytest.approx(diff, rel=1e-12)
    assert r.dot == pytest.approx(dot, rel=1e-12)
    assert r.sum == pytest.approx(s, rel=1e-12, abs=1e-12)


def test_sequential_sum_is_a_left_fold():
    x = np.array([1e16, 1.0, -1e16, 1.0])
    # ((1e16 + 1) - 1e16) + 1 == 1 in float64 left-to-right order
    acc = 0.0
    for v in x:
        acc += v
    assert T.seq_sum(x) == acc


def test_shape_mismatch_is_an_error():
    with pytest.raises(T.TensorError):
        T.axpy_norms(np.zeros(3), np.zeros(4))
    with pytest.raises(T.TensorError):
        T.add(np.zeros((2, 1)), np.zeros((1, 2)))
    with pytest.raises(T.TensorError):
        T.mul(np.zeros(3), np.zeros((3, 1)))
    with pytest.raises(T.TensorError):
        T.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_elementwise_and_reductions():
    a, b = np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0, 1.0], [2.0, 2.0]])
    np.testing.assert_array_equal(T.add(a, b), [[2, 3], [5, 6]])
    np.testing.assert_array_equal(T.sub(a, b), [[0, 1], [1, 2]])
    np.testing.assert_array_equal(T.mul(a, b), [[1, 2], [6, 8]])
    np.testing.assert_array_equal(T.scale(a, 0.5), [[0.5, 1], [1.5, 2]])
    assert T.total(a) == 10.0
    assert T.maximum(a) == 4.0
    assert T.argmax(a) == 3
    np.testing.assert_array_equal(T.take(a, 1), [3, 4])
    with pytest.raises(T.TensorError):
        T.take(a, 2)


def test_non_finite_results_rejected():
    with pytest.raises(T.TensorError):
        T.scale(np.array([1e308]), 10.0)


def test_matmul_against_triple_loop(gen):
    a, b = gen.normal(size=(32, 32)), gen.normal(size=(32, 32))
    assert np.max(np.abs(T.matmul(a, b) - naive_matmul(a, b))) <= 1e-10


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2**32))
def test_blob_round_trip(shape, seed):
    x = T.randn(shape, 0.0, 1.0, seed)
    buf = io.BytesIO()
    T.write_blob(buf, x)
    buf.seek(0)
    y = T.read_blob(buf)
    assert y.shape == x.shape
    assert y.tobytes() == x.tobytes()


def test_blob_layout():
    raw = T.blob_bytes(np.array([[1.0, 2.0, 3.0]]))
    assert raw[:4] == b"CGT1"
    assert raw[4:8] == (2).to_bytes(4, "little")
    assert raw[8:16] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert np.frombuffer(raw[16:], "<f8").tolist() == [1.0, 2.0, 3.0]


def test_blob_rejects_garbage():
    with pytest.raises(T.TensorError):
        T.read_blob(io.BytesIO(b"XXXX"))
    raw = T.blob_bytes(np.ones(4))
    with pytest.raises(T.TensorError):
        T.read_blob(io.BytesIO(raw[:-3]))
