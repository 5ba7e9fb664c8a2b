import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from tmlga import diffcore as dc
from tmlga.diffcore import Rng, Tensor, backward, grad_check
from tmlga.errors import ContractError, DimensionError, DomainError, EmptyInputError, ParameterError

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


class TestMatmul:
    def test_hand_product(self):
        out = Tensor([[1, 2], [3, 4]]) @ Tensor([[5], [6]])
        np.testing.assert_array_equal(out.data, [[17], [39]])

    def test_identity_and_zero(self):
        x = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(dc.matmul(np.eye(3), x).data, x)
        np.testing.assert_array_equal(dc.matmul(np.zeros((2, 2)), np.arange(4.0).reshape(2, 2)).data,
                                      np.zeros((2, 2)))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            dc.matmul(np.ones((2, 3)), np.ones((2, 2)))

    @given(hnp.arrays(float, (3, 2), elements=finite), hnp.arrays(float, (2, 4), elements=finite))
    def test_matches_loop_oracle(self, a, b):
        np.testing.assert_allclose(dc.matmul(a, b).data, oracles.matmul(a.tolist(), b.tolist()),
                                   rtol=1e-12, atol=1e-12)


class TestUnary:
    def test_hand_values(self):
        np.testing.assert_array_equal(dc.tanh([0.0, 0.0]).data, [0.0, 0.0])
        assert dc.sigmoid([0.0]).data[0] == 0.5
        assert dc.log([math.e]).data[0] == pytest.approx(1.0, abs=1e-15)

    def test_log_of_nonpositive_names_index(self):
        with pytest.raises(DomainError, match="2"):
            dc.log([1.0, 2.0, 0.0])

    def test_floored_log_clamps_and_blocks_gradient(self):
        x = leaf([1e-20, 0.5])
        y = dc.log(x, floor=1e-12)
        assert y.data[0] == pytest.approx(math.log(1e-12))
        backward(dc.tsum(y), [x])
        np.testing.assert_allclose(x.grad, [0.0, 2.0])

    def test_unknown_kind(self):
        with pytest.raises(ParameterError):
            dc.apply_unary("relu", [1.0])

    @given(hnp.arrays(float, 5, elements=st.floats(-30, 30)))
    def test_sigmoid_matches_oracle(self, x):
        np.testing.assert_allclose(dc.sigmoid(x).data, [oracles.sigmoid(v) for v in x], rtol=1e-12, atol=1e-15)


class TestSoftmax:
    def test_hand_values(self):
        np.testing.assert_allclose(dc.softmax([0.0, math.log(3)]).data, [0.25, 0.75], atol=1e-15)
        np.testing.assert_allclose(dc.softmax([1000.0, 1000.0]).data, [0.5, 0.5])
        np.testing.assert_allclose(dc.softmax([7.0] * 4).data, [0.25] * 4)

    def test_empty(self):
        with pytest.raises(EmptyInputError):
            dc.softmax(np.zeros(0))

    def test_masked_positions_are_zero(self):
        y = dc.softmax([[1.0, 2.0, 3.0]], mask=[[True, True, False]])
        assert y.data[0, 2] == 0.0
        assert y.data.sum() == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=200)
    @given(hnp.arrays(float, st.integers(1, 12), elements=st.floats(-50, 50)))
    def test_sums_to_one_and_matches_oracle(self, x):
        y = dc.softmax(x).data
        assert abs(y.sum() - 1.0) <= 1e-12
        np.testing.assert_allclose(y, oracles.softmax(list(x)), rtol=1e-9, atol=1e-15)
        np.testing.assert_allclose(dc.log_softmax(x).data, np.log(np.maximum(y, 1e-300)), atol=1e-9)

    @given(hnp.arrays(float, 6, elements=st.floats(-20, 20)), st.floats(-100, 100))
    def test_shift_invariance(self, x, c):
        np.testing.assert_allclose(dc.softmax(x + c).data, dc.softmax(x).data, atol=1e-12)


class TestReductions:
    def test_mean_rows(self):
        np.testing.assert_array_equal(dc.reduce_mean_rows([[1.0, 3.0], [3.0, 1.0]]).data, [2.0, 2.0])
        np.testing.assert_array_equal(dc.reduce_mean_rows([[4.0, 5.0]]).data, [4.0, 5.0])
        np.testing.assert_array_equal(dc.reduce_mean_rows(np.zeros((5, 4))).data, np.zeros(4))

    def test_mean_rows_respects_lengths(self):
        x = np.arange(12.0).reshape(2, 3, 2)
        out = dc.reduce_mean_rows(x, [3, 1]).data
        np.testing.assert_allclose(out, [x[0].mean(0), x[1, 0]])

    def test_mean_rows_empty(self):
        with pytest.raises(EmptyInputError):
            dc.reduce_mean_rows(np.zeros((0, 3)))


class TestDropout:
    def test_identity_cases(self):
        x = Tensor(np.arange(5.0))
        assert dc.dropout(x, 0.5, Rng(0), training=False) is x
        assert dc.dropout(x, 0.0, Rng(0), training=True) is x

    def test_survival_rate(self):
        y = dc.dropout(np.ones(10**6), 0.5, Rng(3), training=True).data
        assert abs(np.mean(y > 0) - 0.5) <= 0.01
        assert set(np.unique(y)) <= {0.0, 2.0}

    @pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
    def test_invalid_probability(self, p):
        with pytest.raises(ParameterError):
            dc.dropout(np.ones(3), p, Rng(0), training=True)


class TestBackward:
    def test_linear_and_square(self):
        x = leaf([1.0, 2.0, 3.0])
        backward(dc.tsum(x), [x])
        np.testing.assert_array_equal(x.grad, [1, 1, 1])
        x = leaf([1.0, 2.0])
        backward(dc.tsum(x * x), [x])
        np.testing.assert_array_equal(x.grad, [2, 4])

    def test_unreachable_leaf_gets_zero(self):
        x, w = leaf([1.0]), leaf([[1.0, 2.0]])
        backward(dc.tsum(x * 3.0), [x, w])
        np.testing.assert_array_equal(w.grad, [[0.0, 0.0]])

    def test_non_scalar_loss(self):
        with pytest.raises(ContractError):
            backward(leaf([1.0, 2.0]) * 2.0)

    def test_shared_subexpression_accumulates(self):
        x = leaf([2.0])
        y = x * x
        backward(dc.tsum(y + y * 3.0), [x])
        np.testing.assert_allclose(x.grad, [16.0])

    def test_broadcast_gradient_is_reduced(self):
        a, b = leaf(np.ones((3, 4))), leaf(np.ones(4))
        backward(dc.tsum(a * b), [a, b])
        np.testing.assert_array_equal(b.grad, [3.0] * 4)

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with dc.no_grad():
            y = x * 2.0
        assert y.node is None and not y.requires_grad


class TestGradCheck:
    def test_tanh_sum(self):
        x = Rng(0).normal(1.0, 8)
        assert grad_check(lambda t: dc.tsum(dc.tanh(t[0])), [x], 1e-5) <= 1e-6

    def test_constant_function(self):
        assert grad_check(lambda t: Tensor(3.0) + dc.tsum(t[0]) * 0.0, [np.ones(3)]) == 0.0

    def test_detects_a_wrong_gradient(self):
        def bad(t):
            x = t[0]
            return dc.tsum(dc.make_op(x.data ** 2, (x,), "bad_square", lambda g: (g * x.data,)))
        assert grad_check(bad, [np.array([1.0, 2.0])]) > 0.1

    def test_coordinate_subsampling(self):
        x = Rng(0).normal(1.0, (20, 20))
        assert grad_check(lambda t: dc.tsum(dc.tanh(t[0])), [x], coords=5, rng=Rng(1)) <= 1e-6


class TestRng:
    def test_streams_are_independent_and_reproducible(self):
        assert np.array_equal(Rng(4, 2).random(5), Rng(4, 2).random(5))
        assert not np.array_equal(Rng(4, 1).random(5), Rng(4, 2).random(5))

    def test_state_round_trip(self):
        import json
        r = Rng(9)
        r.normal(1.0, 7)
        state = json.loads(json.dumps(r.state))
        np.testing.assert_array_equal(Rng.from_state(state).random(4), r.random(4))

    @given(st.integers(-5, 5), st.integers(0, 6))
    def test_integers_closed_range(self, lo, width):
        v = Rng(lo + 100).integers(lo, lo + width)
        assert lo <= v <= lo + width
