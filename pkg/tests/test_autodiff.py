import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from narasr.autodiff import (Tensor, Tape, backward, embedding, exp, gelu, grad_check, layer_norm,
                             log, log_softmax, log_sum_exp, matmul, multi_head_attention, no_grad,
                             parameter, softmax_rows, take_last, tanh)
from narasr.errors import ConfigurationError, DimensionError, NonFiniteError
from oracles import attention_loops, matmul_loops


def attn_params(rng, d, scale=0.5):
    p = {}
    for n in "qkvo":
        p[f"w{n}"] = parameter(rng.normal(scale=scale, size=(d, d)))
        p[f"b{n}"] = parameter(rng.normal(scale=0.1, size=d))
    return p


class TestMatmul:
    def test_identity(self, rng):
        M = rng.normal(size=(2, 2))
        assert np.array_equal(matmul(Tensor(np.eye(2)), Tensor(M)).data, M)

    def test_hand_sum(self):
        out = matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
        assert out.data.tolist() == [[3.0], [7.0]]

    def test_matches_triple_loop(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_batched_weight_gradient(self, rng):
        a = parameter(rng.normal(size=(2, 3, 4)))
        w = parameter(rng.normal(size=(4, 5)))
        assert grad_check(lambda: (matmul(a, w) * matmul(a, w)).sum(), [a, w]) < 1e-7


class TestSoftmax:
    def test_zeros_uniform(self):
        assert np.allclose(softmax_rows(np.zeros((1, 4))).data, 0.25)

    def test_large_equal_logits(self):
        out = softmax_rows(np.array([[1000.0, 1000.0]])).data
        assert out.tolist() == [[0.5, 0.5]]

    def test_log_ratio(self):
        out = softmax_rows(np.array([[math.log(1), math.log(3)]])).data
        np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-15)

    def test_rows_sum_to_one_extreme(self, rng):
        x = rng.uniform(-1e4, 1e4, size=(1000, 7))
        x[::3] *= rng.choice([-1, 1], size=(len(x[::3]), 7))
        y = softmax_rows(x).data
        assert (y >= 0).all()
        np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)

    def test_log_softmax_consistent(self, rng):
        x = rng.normal(size=(4, 6))
        np.testing.assert_allclose(np.exp(log_softmax(x).data), softmax_rows(x).data, atol=1e-14)


class TestLogSumExp:
    def test_singleton(self):
        assert log_sum_exp([2.5]) == 2.5

    def test_exact_sum(self):
        assert log_sum_exp([math.log(2), math.log(3)]) == pytest.approx(math.log(5), abs=1e-15)

    def test_all_neg_inf(self):
        assert log_sum_exp([-np.inf, -np.inf]) == -np.inf

    def test_empty(self):
        with pytest.raises(ValueError):
            log_sum_exp([])

    @given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=30))
    def test_bounds(self, v):
        out = log_sum_exp(v)
        assert max(v) <= out <= max(v) + math.log(len(v)) + 1e-9


class TestAttention:
    def test_zero_query_gives_mean_value(self, rng):
        d, T, L = 8, 5, 3
        p = attn_params(rng, d)
        p["wq"].data[:] = 0
        p["bq"].data[:] = 0
        k = rng.normal(size=(T, d))
        q = rng.normal(size=(L, d))
        out, w = multi_head_attention(q, k, k, 2, p, return_weights=True)
        np.testing.assert_allclose(w.data, 1.0 / T, atol=1e-15)
        values = k @ p["wv"].data + p["bv"].data
        expected = values.mean(axis=0) @ p["wo"].data + p["bo"].data
        np.testing.assert_allclose(out.data, np.tile(expected, (L, 1)), atol=1e-12)

    def test_single_key(self, rng):
        d = 8
        p = attn_params(rng, d)
        k = rng.normal(size=(1, d))
        out = multi_head_attention(rng.normal(size=(4, d)), k, k, 4, p).data
        row = (k @ p["wv"].data + p["bv"].data) @ p["wo"].data + p["bo"].data
        np.testing.assert_allclose(out, np.tile(row, (4, 1)), atol=1e-12)

    def test_matches_per_head_loops(self, rng):
        d, heads = 8, 4
        p = attn_params(rng, d)
        q, k, v = rng.normal(size=(3, d)), rng.normal(size=(5, d)), rng.normal(size=(5, d))
        out = multi_head_attention(q, k, v, heads, p).data
        np.testing.assert_allclose(out, attention_loops(q, k, v, heads, p), atol=1e-10)

    def test_heads_must_divide(self, rng):
        p = attn_params(rng, 6)
        x = rng.normal(size=(2, 6))
        with pytest.raises(ConfigurationError):
            multi_head_attention(x, x, x, 4, p)

    def test_key_value_permutation_invariance(self, rng):
        d = 8
        p = attn_params(rng, d)
        q, kv = rng.normal(size=(3, d)), rng.normal(size=(6, d))
        perm = rng.permutation(6)
        a = multi_head_attention(q, kv, kv, 2, p).data
        b = multi_head_attention(q, kv[perm], kv[perm], 2, p).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_masked_keys_are_ignored(self, rng):
        d = 8
        p = attn_params(rng, d)
        q, kv = rng.normal(size=(3, d)), rng.normal(size=(4, d))
        padded = np.vstack([kv, rng.normal(size=(2, d))])[None]
        mask = np.where(np.arange(6) >= 4, -1e9, 0.0)[None, None, None, :]
        a = multi_head_attention(q, kv, kv, 2, p).data
        b = multi_head_attention(q, padded, padded, 2, p, key_mask=mask).data[0]
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_gradient(self, rng):
        d = 4
        p = attn_params(rng, d)
        q, kv = parameter(rng.normal(size=(2, d))), parameter(rng.normal(size=(3, d)))
        c = rng.normal(size=(2, d))

        def f():
            out = multi_head_attention(q, kv, kv, 2, p)
            return (out * out * c).sum()

        assert grad_check(f, [q, kv, *p.values()], max_coords=None) < 1e-4


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = parameter(rng.normal(size=(3, 2)))
        backward(x.sum())
        assert np.array_equal(x.grad, np.ones((3, 2)))

    def test_square(self):
        x = parameter(3.0)
        backward(x * x)
        assert x.grad == 6.0

    def test_untouched_parameter_gets_zero(self, rng):
        x, y = parameter(rng.normal(size=3)), parameter(rng.normal(size=3))
        backward(x.sum(), [x, y])
        assert np.array_equal(y.grad, np.zeros(3))

    def test_non_scalar_rejected(self, rng):
        x = parameter(rng.normal(size=3))
        with pytest.raises(ValueError):
            backward(x * 2.0)

    def test_tape_is_reverse_topological(self, rng):
        x = parameter(rng.normal(size=(2, 2)))
        h = tanh(x @ x)
        loss = (h * x).sum()
        tape = Tape(loss)
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        for node in tape.nodes:
            for p in node._parents:
                if p.requires_grad:
                    assert pos[id(p)] < pos[id(node)]

    def test_shared_subexpression_accumulates(self):
        x = parameter(2.0)
        y = x * x
        backward(y * y + y)  # x^4 + x^2 -> 4x^3 + 2x
        assert x.grad == pytest.approx(4 * 8 + 4)

    def test_no_grad_records_nothing(self, rng):
        x = parameter(rng.normal(size=3))
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad

    def test_non_finite_is_an_error(self):
        with pytest.raises(NonFiniteError):
            log(Tensor([0.0]))


class TestGradCheck:
    def test_linear_exact(self, rng):
        w = parameter(rng.normal(size=(3, 2)))
        c = rng.normal(size=(3, 2))
        assert grad_check(lambda: (w * c).sum(), [w], max_coords=None) <= 1e-10

    def test_softmax_cross_entropy(self, rng):
        logits = parameter(rng.normal(size=(4, 5)))
        tgt = rng.integers(5, size=4)
        err = grad_check(lambda: -take_last(log_softmax(logits), tgt).mean(), [logits], eps=1e-5,
                         max_coords=None)
        assert err <= 1e-6

    @pytest.mark.parametrize("op", [exp, tanh, gelu])
    def test_elementwise(self, rng, op):
        x = parameter(rng.normal(size=(3, 4)))
        assert grad_check(lambda: (op(x) * op(x)).sum(), [x], max_coords=None) < 1e-7

    def test_layer_norm(self, rng):
        x = parameter(rng.normal(size=(2, 3, 5)))
        g, b = parameter(rng.normal(size=5)), parameter(rng.normal(size=5))
        c = rng.normal(size=(2, 3, 5))
        assert grad_check(lambda: (layer_norm(x, g, b) * c).sum(), [x, g, b], max_coords=None) < 1e-6

    def test_embedding_and_take(self, rng):
        table = parameter(rng.normal(size=(5, 3)))
        ids = np.array([[0, 2, 2], [4, 1, 0]])
        c = rng.normal(size=(2, 3, 3))
        err = grad_check(lambda: (embedding(table, ids) * c).sum(), [table], max_coords=None)
        assert err < 1e-8

    def test_broadcast_bias(self, rng):
        x = parameter(rng.normal(size=(2, 3, 4)))
        b = parameter(rng.normal(size=4))
        c = rng.normal(size=(2, 3, 4))
        assert grad_check(lambda: ((x + b) * (x + b) * c).sum(), [x, b], max_coords=None) < 1e-7

    def test_transpose_reshape(self, rng):
        x = parameter(rng.normal(size=(2, 3, 4)))
        c = rng.normal(size=(4, 6))
        f = lambda: (x.transpose(2, 0, 1).reshape(4, 6) * c).sum()  # noqa: E731
        assert grad_check(f, [x], max_coords=None) < 1e-8


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_random_graphs_match_finite_differences(r, c, seed):
    rng = np.random.default_rng(seed)
    a = parameter(rng.normal(size=(r, c)))
    w = parameter(rng.normal(size=(c, 3)))
    tgt = rng.integers(3, size=r)

    def f():
        h = gelu(a @ w)
        return -take_last(log_softmax(h + softmax_rows(h)), tgt).sum()

    assert grad_check(f, [a, w], max_coords=None) < 1e-4
