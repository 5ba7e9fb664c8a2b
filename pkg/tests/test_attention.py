import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmlga import diffcore as dc
from tmlga.attention import (AttentionParams, attention_loss, dynamic_filter, guided_attention,
                             outside_span_mask, project)
from tmlga.diffcore import Rng, Tensor, grad_check
from tmlga.errors import DimensionError, EmptyInputError, RangeError


def params(rng, d_v=5, d_s=4, d=3):
    return AttentionParams.init(d_v, d_s, d, rng)


def zero_params(d_v=5, d_s=4, d=3):
    return AttentionParams(*(Tensor(np.zeros(s)) for s in [(d, d_v), d, (d, d_s), d, (d, d), d]))


class TestProject:
    def test_zero(self):
        G_d, h_d = project(np.ones((6, 5)), np.ones(4), zero_params())
        assert not G_d.data.any() and not h_d.data.any()

    def test_identity(self):
        p = zero_params(d_v=3, d=3)
        p.P_v.data = np.eye(3)
        G = Rng(0).normal(1.0, (4, 3))
        np.testing.assert_array_equal(project(G, np.ones(4), p)[0].data, G)

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            project(np.ones((6, 4)), np.ones(4), zero_params())

    def test_gradcheck(self):
        rng = Rng(1)
        p = params(rng)
        w1, w2 = rng.normal(1.0, (6, 3)), rng.normal(1.0, 3)

        def f(t):
            q = AttentionParams(*t[2:])
            G_d, h_d = project(t[0], t[1], q)
            return dc.tsum(G_d * w1) + dc.tsum(h_d * w2)

        inputs = [rng.normal(1.0, (6, 5)), rng.normal(1.0, 4)] + [rng.normal(0.5, x.shape) for x in p.named().values()]
        assert grad_check(f, inputs) <= 1e-4


class TestFilter:
    def test_zero_and_saturation(self):
        p = zero_params()
        assert not dynamic_filter(np.ones(3), p).data.any()
        p.b_theta.data[:] = 40.0
        np.testing.assert_allclose(dynamic_filter(np.ones(3), p).data, 1.0)

    def test_different_queries_give_different_filters(self):
        p = params(Rng(2))
        p.W_theta.data = Rng(3).normal(1.0, (3, 3))
        a, b = dynamic_filter(np.array([1.0, 0.0, 0.5]), p), dynamic_filter(np.array([0.0, 1.0, -0.5]), p)
        assert not np.allclose(a.data, b.data)


class TestGuidedAttention:
    def test_identical_rows_are_uniform(self):
        out = guided_attention(np.tile([1.0, 2.0, 3.0], (5, 1)), np.array([0.3, -1.0, 2.0]))
        np.testing.assert_allclose(out.A.data, 0.2)

    def test_zero_filter_is_uniform(self):
        out = guided_attention(Rng(0).normal(1.0, (4, 3)), np.zeros(3))
        np.testing.assert_allclose(out.A.data, 0.25)

    def test_hand_softmax(self):
        # n=2, so scores are <G_d[i], theta> / sqrt(2); choose theta so they are [0, ln 3]
        G_d = np.array([[0.0, 1.0], [1.0, 1.0]])
        theta = np.array([math.log(3) * math.sqrt(2), 0.0])
        out = guided_attention(G_d, theta)
        np.testing.assert_allclose(out.scores.data, [0.0, math.log(3)], atol=1e-15)
        np.testing.assert_allclose(out.A.data, [0.25, 0.75], atol=1e-15)
        np.testing.assert_allclose(out.G_bar.data, G_d * [[0.25], [0.75]], atol=1e-15)

    def test_scale_uses_feature_count(self):
        G_d = Rng(1).normal(1.0, (9, 4))
        theta = Rng(2).normal(1.0, 4)
        np.testing.assert_allclose(guided_attention(G_d, theta).scores.data, G_d @ theta / 3.0)

    @settings(max_examples=25)
    @given(st.integers(0, 10**6))
    def test_batched_rows_match_single(self, seed):
        rng = Rng(seed)
        lengths = [5, rng.integers(1, 5)]
        G = rng.normal(1.0, (2, 5, 3))
        theta = rng.normal(1.0, (2, 3))
        out = guided_attention(G, theta, lengths)
        for b, n in enumerate(lengths):
            single = guided_attention(G[b, :n], theta[b])
            np.testing.assert_allclose(out.A.data[b, :n], single.A.data, atol=1e-14)
            assert not out.A.data[b, n:].any()
            assert abs(out.A.data[b].sum() - 1.0) <= 1e-12

    def test_empty(self):
        with pytest.raises(EmptyInputError):
            guided_attention(np.zeros((0, 3)), np.zeros(3))


class TestAttentionLoss:
    def test_hand_value(self):
        assert attention_loss(np.array([0.5, 0.5, 0.0, 0.0]), 3, 4).item() == pytest.approx(2 * math.log(2), abs=1e-9)

    def test_mass_inside_span(self):
        assert attention_loss(np.array([0.0, 0.3, 0.7, 0.0]), 2, 3).item() == 0.0

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=8))
    def test_full_span_is_zero(self, w):
        a = np.array(w)
        assert attention_loss(a, 1, len(a)).item() == 0.0

    @given(st.lists(st.floats(0, 1, exclude_max=True), min_size=2, max_size=8), st.data())
    def test_non_negative_and_matches_definition(self, w, data):
        a = np.array(w)
        s = data.draw(st.integers(1, len(a)))
        e = data.draw(st.integers(s, len(a)))
        want = -sum(math.log(max(1 - a[i - 1], 1e-12)) for i in range(1, len(a) + 1) if i < s or i > e)
        got = attention_loss(a, s, e).item()
        assert got >= 0
        assert got == pytest.approx(want, rel=1e-12, abs=1e-12)

    def test_mass_one_outside_is_finite(self):
        assert math.isfinite(attention_loss(np.array([1.0, 0.0]), 2, 2).item())

    @pytest.mark.parametrize("s, e", [(0, 2), (3, 2), (2, 5)])
    def test_invalid_span(self, s, e):
        with pytest.raises(RangeError):
            attention_loss(np.full(4, 0.25), s, e)

    def test_outside_mask_is_inclusive(self):
        np.testing.assert_array_equal(outside_span_mask(2, 3, 5)[0], [1, 0, 0, 1, 1])

    def test_batched_matches_sum_of_singles(self):
        A = np.array([[0.1, 0.2, 0.3, 0.4], [0.5, 0.5, 0.0, 0.0]])
        with pytest.raises(RangeError):
            attention_loss(A, [1, 3], [2, 3], lengths=[4, 2])
        total = attention_loss(A, [1, 1], [2, 1], lengths=[4, 2]).item()
        want = attention_loss(A[0], 1, 2).item() + attention_loss(A[1, :2], 1, 1).item()
        assert total == pytest.approx(want, abs=1e-12)

    def test_gradcheck_full_path(self):
        rng = Rng(7)
        p = params(rng, d_v=5, d_s=4, d=4)

        def f(t):
            q = AttentionParams(*t[2:])
            G_d, h_d = project(t[0], t[1], q)
            return attention_loss(guided_attention(G_d, dynamic_filter(h_d, q)).A, 2, 4)

        inputs = [rng.normal(1.0, (6, 5)), rng.normal(1.0, 4)] + [rng.normal(0.5, x.shape) for x in p.named().values()]
        assert grad_check(f, inputs) <= 1e-4
