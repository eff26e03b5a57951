"""Numeric kernel contracts: stable softmax, normalization, grad checking."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xdora.errors import NonFinite, ZeroVector
from xdora.numerics import grad_check, l2_normalize, softmax_rows
from xdora.rng import make_rng

finite_rows = st.lists(
    st.lists(st.floats(min_value=-800, max_value=800, allow_nan=False),
             min_size=2, max_size=6),
    min_size=1, max_size=5,
).filter(lambda rows: len({len(r) for r in rows}) == 1)


class TestSoftmax:
    def test_symmetry(self):
        out = softmax_rows(np.array([[0.0, 0.0]]))
        np.testing.assert_allclose(out, [[0.5, 0.5]], atol=1e-12)

    def test_large_values_stable(self):
        out = softmax_rows(np.array([[1000.0, 1000.0]]))
        np.testing.assert_allclose(out, [[0.5, 0.5]], atol=1e-12)

    def test_two_element_value(self):
        out = softmax_rows(np.array([[1.0, 2.0]]))
        np.testing.assert_allclose(out, [[0.26894, 0.73106]], atol=1e-5)

    def test_cols_axis(self):
        out = softmax_rows(np.array([[1.0, 5.0], [1.0, 5.0]]), axis="cols")
        np.testing.assert_allclose(out, [[0.5, 0.5], [0.5, 0.5]], atol=1e-12)

    @given(finite_rows)
    @settings(max_examples=60, deadline=None)
    def test_rows_sum_to_one(self, rows):
        out = softmax_rows(np.array(rows, dtype=np.float64))
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(out >= 0)

    @given(finite_rows, st.floats(min_value=-500, max_value=500, allow_nan=False))
    @settings(max_examples=60, deadline=None)
    def test_shift_invariance(self, rows, c):
        m = np.array(rows, dtype=np.float64)
        np.testing.assert_allclose(softmax_rows(m + c), softmax_rows(m),
                                   atol=1e-12)

    def test_huge_range(self):
        # range well past exp overflow still normalizes
        out = softmax_rows(np.array([[-400.0, 400.0]]))
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


class TestL2Normalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(l2_normalize([3.0, 4.0]), [0.6, 0.8],
                                   atol=1e-12)

    def test_zero_vector_rejected(self):
        with pytest.raises(ZeroVector):
            l2_normalize([0.0, 0.0])

    @given(st.lists(st.floats(min_value=-100, max_value=100, allow_nan=False),
                    min_size=1, max_size=8),
           st.floats(min_value=1e-3, max_value=1e3))
    @settings(max_examples=60, deadline=None)
    def test_idempotent_and_scale_invariant(self, v, lam):
        v = np.array(v)
        if np.linalg.norm(v) < 1e-6:
            return
        unit = l2_normalize(v)
        np.testing.assert_allclose(np.linalg.norm(unit), 1.0, atol=1e-12)
        np.testing.assert_allclose(l2_normalize(unit), unit, atol=1e-12)
        np.testing.assert_allclose(l2_normalize(lam * v), unit, atol=1e-12)


class TestMatmulOracle:
    def test_against_triple_loop(self):
        rng = make_rng(7)
        a = rng.normal(size=(32, 32))
        b = rng.normal(size=(32, 32))
        naive = np.zeros((32, 32))
        for i in range(32):
            for j in range(32):
                acc = 0.0
                for k in range(32):
                    acc += a[i, k] * b[k, j]
                naive[i, j] = acc
        np.testing.assert_allclose(a @ b, naive, atol=1e-10)


class TestRng:
    def test_fixed_seed_bit_identical(self):
        a = make_rng(99).integers(0, 2**63, size=64)
        b = make_rng(99).integers(0, 2**63, size=64)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, make_rng(100).integers(0, 2**63, size=64))


class TestGradCheck:
    def test_quadratic(self):
        params = {"x": np.array([3.0])}

        def f(p):
            return float(p["x"][0] ** 2)

        report = grad_check(f, params, {"x": np.array([6.0])}, eps=1e-6)
        assert report["x"] < 1e-9

    def test_constant(self):
        params = {"x": np.array([1.0, -2.0])}
        report = grad_check(lambda p: 5.0, params,
                            {"x": np.zeros(2)}, eps=1e-6)
        assert report["x"] == 0.0

    def test_nonfinite_detected(self):
        params = {"x": np.array([0.0])}

        def f(p):
            # NaN as soon as the perturbation goes negative
            with np.errstate(invalid="ignore"):
                return float(np.sqrt(p["x"][0]))

        with pytest.raises(NonFinite):
            grad_check(f, params, {"x": np.array([0.0])}, eps=1e-5)

    def test_restores_parameters(self):
        params = {"x": np.array([1.5, -0.5])}

        def f(p):
            return float(np.sum(p["x"] ** 3))

        grad_check(f, params, {"x": 3 * params["x"] ** 2}, eps=1e-6)
        np.testing.assert_array_equal(params["x"], [1.5, -0.5])
