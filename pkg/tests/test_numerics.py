import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedlora_sim.errors import NumericError, ParameterError, ShapeError
from fedlora_sim.numerics import (
    RngStream,
    as_matrix,
    finite_diff_grad,
    gaussian,
    matmul,
    shuffle,
    uniform,
)


def test_identity_product():
    m = np.array([[1.5, -2.0], [0.25, 4.0]])
    np.testing.assert_array_equal(matmul(np.eye(2), m), m)


def test_hand_product():
    out = matmul(as_matrix([[1, 2], [3, 4]]), as_matrix([[5], [6]]))
    np.testing.assert_array_equal(out, [[17.0], [39.0]])


def test_inner_dimension_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_as_matrix_reshape_and_checks():
    m = as_matrix([1, 2, 3, 4, 5, 6], rows=2, cols=3)
    assert m.shape == (2, 3) and m.flags["C_CONTIGUOUS"]
    with pytest.raises(ShapeError):
        as_matrix([1, 2, 3], rows=2, cols=2)
    with pytest.raises(NumericError):
        as_matrix([[np.nan, 1.0]])


def test_non_finite_product_rejected():
    with pytest.raises(NumericError):
        matmul(np.array([[1e308]]), np.array([[1e308]]))


small = st.integers(min_value=1, max_value=5)


@settings(max_examples=50, deadline=None)
@given(small, small, small, small, st.integers(0, 2**32 - 1))
def test_associativity(p, q, r, s, seed):
    g = np.random.default_rng(seed)
    a, b, c = g.normal(size=(p, q)), g.normal(size=(q, r)), g.normal(size=(r, s))
    np.testing.assert_allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), rtol=0, atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(small, small, small, st.integers(0, 2**32 - 1))
def test_transpose_of_product(p, q, r, seed):
    g = np.random.default_rng(seed)
    a, b = g.normal(size=(p, q)), g.normal(size=(q, r))
    np.testing.assert_allclose(matmul(a, b).T, matmul(b.T, a.T), rtol=0, atol=1e-12)


def test_zero_variance_gaussian():
    assert gaussian(RngStream(3, "x"), 0.0, 0.0) == 0.0


def test_stream_determinism():
    a, b = RngStream(42, "init"), RngStream(42, "init")
    xs = [gaussian(a, 0, 1) for _ in range(100)]
    ys = [gaussian(b, 0, 1) for _ in range(100)]
    assert xs == ys


def test_distinct_streams_differ():
    a, b = RngStream(42, "partition"), RngStream(42, "client-sample")
    assert [uniform(a, 0, 1) for _ in range(5)] != [uniform(b, 0, 1) for _ in range(5)]


def test_child_streams_are_reproducible():
    assert RngStream(1, "a").child("b").stream_id == "a/b"
    x = RngStream(1, "a").child("b").generator.random(3)
    y = RngStream(1, "a/b").generator.random(3)
    np.testing.assert_array_equal(x, y)


def test_shuffle_repeatable():
    perms = [shuffle(RngStream(7, "s"), [1, 2, 3, 4, 5]) for _ in range(3)]
    assert perms[0] == perms[1] == perms[2]
    assert sorted(perms[0]) == [1, 2, 3, 4, 5]


def test_parameter_checks():
    rng = RngStream(0)
    with pytest.raises(ParameterError):
        uniform(rng, 1.0, 1.0)
    with pytest.raises(ParameterError):
        gaussian(rng, 0.0, -1.0)
    with pytest.raises(ParameterError):
        RngStream(-1)


def test_uniform_range():
    rng = RngStream(5, "u")
    vals = [uniform(rng, -2.0, 3.0) for _ in range(1000)]
    assert min(vals) >= -2.0 and max(vals) < 3.0


def test_fd_square():
    g = finite_diff_grad(lambda x: x[0] ** 2, [3.0], 1e-5)
    assert abs(g[0] - 6.0) < 1e-8


def test_fd_constant():
    np.testing.assert_array_equal(finite_diff_grad(lambda x: 4.0, [1.0, 2.0, 3.0]), np.zeros(3))


def test_fd_product():
    g = finite_diff_grad(lambda x: x[0] * x[1], [2.0, 5.0], 1e-5)
    np.testing.assert_allclose(g, [5.0, 2.0], atol=1e-8)


def test_fd_errors():
    with pytest.raises(ParameterError):
        finite_diff_grad(lambda x: 0.0, [1.0], h=0)
    with pytest.raises(NumericError):
        finite_diff_grad(lambda x: float("inf"), [1.0])
