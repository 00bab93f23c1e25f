import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kv_evict.numerics import l2_norm, matmul, softmax, softmax_rows

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TestSoftmax:
    def test_symmetric_pair(self):
        np.testing.assert_array_equal(softmax([0.0, 0.0]), [0.5, 0.5])

    @pytest.mark.parametrize("x", [-1e6, -3.0, 0.0, 7.5, 1e300])
    def test_single_element(self, x):
        assert softmax([x]).tolist() == [1.0]

    def test_against_high_precision(self):
        # mpmath at 40 digits: exp(i) / sum(exp(1..3))
        expected = [0.090030573170380458, 0.24472847105479765, 0.66524095577482189]
        np.testing.assert_allclose(softmax([1.0, 2.0, 3.0]), expected, rtol=1e-14)

    def test_empty(self):
        with pytest.raises(ValueError, match="empty logits"):
            softmax([])

    def test_large_logits_do_not_overflow(self):
        out = softmax([1000.0, 1000.0, 999.0])
        assert np.all(np.isfinite(out))
        assert abs(out.sum() - 1) <= 1e-12

    @given(arrays(np.float64, st.integers(1, 40), elements=finite), finite)
    def test_sums_to_one_and_shift_invariant(self, z, c):
        p = softmax(z)
        assert abs(p.sum() - 1.0) <= 1e-12
        assert np.all(p > 0) or np.all(p >= 0)
        np.testing.assert_allclose(softmax(z + c), p, atol=1e-12)

    def test_masked_rows(self):
        logits = np.array([[1.0, 2.0], [3.0, 4.0]])
        mask = np.array([[True, False], [False, False]])
        out = softmax_rows(logits, mask)
        np.testing.assert_array_equal(out, [[1.0, 0.0], [0.0, 0.0]])


class TestMatmul:
    def test_identity(self, rng):
        m = rng.standard_normal((2, 3))
        np.testing.assert_array_equal(matmul(np.eye(2), m), m)

    def test_zeros(self, rng):
        m = rng.standard_normal((3, 4))
        assert not matmul(np.zeros((2, 3)), m).any()

    def test_hand_product(self):
        np.testing.assert_array_equal(matmul([[1, 2], [3, 4]], [[1], [1]]), [[3], [7]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(np.ones((2, 3)), np.ones((2, 2)))

    @settings(max_examples=50)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
    def test_associativity(self, p, q, r, s, seed):
        g = np.random.default_rng(seed)
        a, b, c = g.standard_normal((p, q)), g.standard_normal((q, r)), g.standard_normal((r, s))
        left = matmul(matmul(a, b), c)
        right = matmul(a, matmul(b, c))
        np.testing.assert_allclose(left, right, rtol=1e-9, atol=1e-12)

    def test_bit_reproducible(self, rng):
        a, b = rng.standard_normal((17, 9)), rng.standard_normal((9, 5))
        assert matmul(a, b).tobytes() == matmul(a.copy(), b.copy()).tobytes()


class TestL2Norm:
    @pytest.mark.parametrize("v, expected", [([0, 0, 0], 0.0), ([3, 4], 5.0), ([1, 1, 1, 1], 2.0)])
    def test_examples(self, v, expected):
        assert l2_norm(v) == expected

    @given(
        arrays(np.float64, 8, elements=finite),
        arrays(np.float64, 8, elements=finite),
        finite,
    )
    def test_triangle_and_homogeneity(self, u, v, c):
        assert l2_norm(u + v) <= l2_norm(u) + l2_norm(v) + 1e-9
        assert abs(l2_norm(c * u) - abs(c) * l2_norm(u)) <= 1e-9 * (1 + abs(c) * l2_norm(u))
