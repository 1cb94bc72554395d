import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from curlora.matrix import (
    RandomSource,
    ShapeError,
    column_norms_sq,
    frobenius_norm,
    matmul,
    read_matrix,
    row_norms_sq,
    transpose,
    weighted_sample_without_replacement,
    write_matrix,
)

finite = st.floats(-1e3, 1e3, allow_nan=False)
small_dims = st.tuples(st.integers(1, 6), st.integers(1, 6))


@st.composite
def matrices(draw, shape=None):
    shape = shape or draw(small_dims)
    return draw(arrays(np.float64, shape, elements=finite))


def test_matmul_matches_hand_product():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0], [6.0]])
    np.testing.assert_array_equal(matmul(a, b), [[17.0], [39.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_non_finite_input_rejected():
    with pytest.raises(ValueError):
        matmul(np.array([[np.nan]]), np.ones((1, 1)))


@given(matrices())
def test_frobenius_equals_sqrt_of_column_norm_sum(m):
    assert frobenius_norm(m) == pytest.approx(np.sqrt(column_norms_sq(m).sum()), rel=1e-12, abs=1e-12)
    assert column_norms_sq(m).sum() == pytest.approx(row_norms_sq(m).sum(), rel=1e-12, abs=1e-9)


@given(matrices())
def test_transpose_is_an_involution(m):
    np.testing.assert_array_equal(transpose(transpose(m)), m)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_matmul_agrees_with_loop_oracle(m, k, n, seed):
    gen = np.random.default_rng(seed)
    a, b = gen.normal(size=(m, k)), gen.normal(size=(k, n))
    loop = np.array([[sum(a[i, t] * b[t, j] for t in range(k)) for j in range(n)] for i in range(m)])
    np.testing.assert_allclose(matmul(a, b), loop, rtol=1e-12, atol=1e-12)


def test_random_source_is_reproducible_and_children_are_independent():
    a, b = RandomSource(7), RandomSource(7)
    assert [a.uniform() for _ in range(5)] == [b.uniform() for _ in range(5)]
    # a child does not depend on how much the parent has been used
    fresh = RandomSource(7).child("x", 3).uniform()
    assert a.child("x", 3).uniform() == fresh
    assert RandomSource(7).child("y").uniform() != fresh


@given(st.lists(st.floats(0.01, 100), min_size=1, max_size=12), st.data())
def test_sampler_returns_distinct_in_range_indices(weights, data):
    k = data.draw(st.integers(0, len(weights)))
    seed = data.draw(st.integers(0, 2**32 - 1))
    idx = weighted_sample_without_replacement(weights, k, RandomSource(seed))
    assert len(idx) == k == len(set(idx))
    assert all(0 <= i < len(weights) for i in idx)


def test_sampler_same_seed_same_draws():
    w = [1.0, 2.0, 3.0, 4.0]
    assert weighted_sample_without_replacement(w, 3, RandomSource(5)) == weighted_sample_without_replacement(
        w, 3, RandomSource(5)
    )


def test_sampler_rejects_bad_requests():
    with pytest.raises(ValueError):
        weighted_sample_without_replacement([1.0, 2.0], 3, RandomSource(0))
    with pytest.raises(ValueError):
        weighted_sample_without_replacement([1.0, 0.0], 1, RandomSource(0))


def test_sampler_second_draw_renormalises():
    # with weights (1, 1, 2), P(second = 0) = P(1 first) * 1/3 + P(2 first) * 1/2 = 1/12 + 1/4 = 1/3
    rng = RandomSource(11)
    n = 40_000
    hits = sum(weighted_sample_without_replacement([1.0, 1.0, 2.0], 2, rng)[1] == 0 for _ in range(n))
    assert hits / n == pytest.approx(1 / 3, abs=0.01)


@given(matrices())
def test_matrix_file_round_trip(tmp_path_factory, m):
    path = tmp_path_factory.mktemp("mat") / "m.dmat"
    write_matrix(path, m)
    np.testing.assert_array_equal(read_matrix(path), m)


def test_matrix_file_layout(tmp_path):
    path = tmp_path / "m.dmat"
    write_matrix(path, np.array([[1.0, 2.0, 3.0]]))
    raw = path.read_bytes()
    assert raw[:4] == b"DMAT"
    assert int.from_bytes(raw[8:16], "little") == 1
    assert int.from_bytes(raw[16:24], "little") == 3
    assert len(raw) == 24 + 3 * 8


def test_matrix_file_bad_magic(tmp_path):
    path = tmp_path / "junk"
    path.write_bytes(b"not a matrix at all, sorry")
    with pytest.raises(ValueError, match="magic"):
        read_matrix(path)
