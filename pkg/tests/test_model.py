import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from narasr.autodiff import Tensor, grad_check, no_grad
from narasr.errors import ConfigurationError, DimensionError
from narasr.model import (ModelConfig, PassCounter, convert_length, ctc_branch, encode, forward_batch,
                          forward_nar, fuse_logits, infer, init_params, lm_encode, modality_convert,
                          positional_embedding, preliminary_logits)
from narasr.training import TrainConfig, joint_loss
from narasr.vocab import Vocabulary
from conftest import make_tiny_model


def test_config_rejects_indivisible_heads():
    with pytest.raises(ConfigurationError):
        ModelConfig(vocab_size=6, d_in=3, d_model=6, heads=4)


def test_vocab_size_must_match(tiny_vocab):
    cfg = ModelConfig(vocab_size=7, d_in=3, d_model=8, heads=2)
    with pytest.raises(DimensionError):
        init_params(cfg, tiny_vocab)


class TestEncoder:
    def test_shape(self, tiny_model, rng):
        assert encode(rng.normal(size=(7, 3)), tiny_model).shape == (7, 8)

    def test_deterministic(self, tiny_model, rng):
        x = rng.normal(size=(5, 3))
        assert np.array_equal(encode(x, tiny_model).data, encode(x, tiny_model).data)

    def test_zero_weights_zero_output(self, tiny_vocab, rng):
        params = make_tiny_model(tiny_vocab)
        for t in params.tensors.values():
            t.data[:] = 0
        assert np.array_equal(encode(rng.normal(size=(4, 3)), params).data, np.zeros((4, 8)))

    def test_wrong_feature_dim(self, tiny_model, rng):
        with pytest.raises(DimensionError):
            encode(rng.normal(size=(4, 5)), tiny_model)

    def test_no_frames(self, tiny_model):
        with pytest.raises(ValueError):
            encode(np.zeros((0, 3)), tiny_model)

    def test_ctc_branch_shape(self, tiny_model, rng):
        h = encode(rng.normal(size=(6, 3)), tiny_model)
        assert ctc_branch(h, tiny_model).shape == (6, tiny_model.vocab.V)


class TestPositionalEmbedding:
    def test_formula(self):
        pe = positional_embedding(5, 6)
        for pos in range(5):
            for i in range(3):
                angle = pos / 10000 ** (2 * i / 6)
                assert pe[pos, 2 * i] == pytest.approx(math.sin(angle), abs=1e-15)
                assert pe[pos, 2 * i + 1] == pytest.approx(math.cos(angle), abs=1e-15)

    def test_rows_distinct(self):
        pe = positional_embedding(50, 16)
        assert len({row.tobytes() for row in pe}) == 50

    def test_needs_positive_length(self):
        with pytest.raises(ValueError):
            positional_embedding(0, 8)

    def test_read_only(self):
        with pytest.raises(ValueError):
            positional_embedding(3, 4)[0, 0] = 1.0


class TestConversion:
    def test_single_frame(self, tiny_model, rng):
        # one key: every query gets that frame's value projection
        h = encode(rng.normal(size=(1, 3)), tiny_model)
        out = convert_length(h, 4, tiny_model).data
        p = {k: v.data for k, v in tiny_model.sub("mcm").items()}
        row = (h.data @ p["wv"] + p["bv"]) @ p["wo"] + p["bo"]
        np.testing.assert_allclose(out, np.tile(row, (4, 1)), atol=1e-12)

    def test_shapes(self, tiny_model, rng):
        h = encode(rng.normal(size=(9, 3)), tiny_model)
        H = convert_length(h, 4, tiny_model)
        assert H.shape == (4, 8)
        assert preliminary_logits(H, tiny_model).shape == (4, tiny_model.vocab.V)

    def test_one_hot_limit(self, rng):
        M = rng.normal(size=(6, 4))
        ids = np.array([2, 5, 0])
        L_a = np.full((3, 6), -1e4)
        L_a[np.arange(3), ids] = 1e4
        W, H_LM = modality_convert(L_a, M)
        np.testing.assert_allclose(W.data, np.eye(6)[ids], atol=1e-15)
        np.testing.assert_allclose(H_LM.data, M[ids], atol=1e-12)

    def test_convex_combination(self, rng):
        M = rng.normal(size=(6, 4))
        W, H_LM = modality_convert(rng.normal(scale=3, size=(5, 6)), M)
        np.testing.assert_allclose(W.data.sum(axis=1), 1.0, atol=1e-12)
        assert (W.data >= 0).all()
        lo, hi = M.min(axis=0), M.max(axis=0)
        assert (H_LM.data >= lo - 1e-12).all() and (H_LM.data <= hi + 1e-12).all()

    def test_row_mismatch(self, rng):
        with pytest.raises(DimensionError):
            modality_convert(rng.normal(size=(2, 5)), rng.normal(size=(6, 4)))


class TestFusion:
    def test_alpha_zero(self, rng):
        a = rng.normal(size=(3, 6))
        assert np.array_equal(fuse_logits(rng.normal(size=(3, 6)), a, 0.0).data, a)

    def test_linear(self, rng):
        l, a = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
        np.testing.assert_allclose(fuse_logits(l, a, 0.3).data, 0.3 * l + a, atol=1e-15)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            fuse_logits(rng.normal(size=(3, 6)), rng.normal(size=(2, 6)), 0.3)


class TestForward:
    def test_trace_is_the_composition(self, tiny_model, rng):
        x = rng.normal(size=(8, 3))
        tr = forward_nar(x, 3, tiny_model)
        H_AC = encode(x, tiny_model)
        H = convert_length(H_AC, 3, tiny_model)
        L_a = preliminary_logits(H, tiny_model)
        W_a, H_LM = modality_convert(L_a, tiny_model["M_BERT"])
        L_l = lm_encode(H_LM, tiny_model)
        L_f = fuse_logits(L_l, L_a, tiny_model.config.alpha)
        for name, want in [("H_AC", H_AC), ("H", H), ("L_a", L_a), ("W_a", W_a), ("H_LM", H_LM),
                           ("L_l", L_l), ("L_f", L_f)]:
            np.testing.assert_array_equal(getattr(tr, name).data, want.data, err_msg=name)
        np.testing.assert_array_equal(tr.frame_logits.data, ctc_branch(H_AC, tiny_model).data)
        np.testing.assert_array_equal(tr.H_PE, positional_embedding(3, 8))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 50), st.integers(1, 20))
    def test_length_contract(self, T, L):
        vocab = Vocabulary.synthetic(3)
        params = make_tiny_model(vocab)
        x = np.random.default_rng(T * 100 + L).normal(size=(T, 3))
        with no_grad():
            tr = forward_nar(x, L, params)
        V = vocab.V
        assert tr.H_AC.shape == (T, 8) and tr.frame_logits.shape == (T, V)
        assert tr.H_PE.shape == (L, 8) and tr.H.shape == (L, 8)
        for name in ("L_a", "W_a", "L_l", "L_f"):
            assert getattr(tr, name).shape == (L, V)
        assert tr.H_LM.shape == (L, 8)
        assert (tr.T, tr.L) == (T, L)

    def test_target_length_positive(self, tiny_model, rng):
        with pytest.raises(ValueError):
            forward_nar(rng.normal(size=(4, 3)), 0, tiny_model)

    def test_batch_matches_single(self, tiny_model, rng):
        feats = [rng.normal(size=(T, 3)) for T in (7, 4, 9)]
        lens = [3, 2, 4]
        bt = forward_batch(feats, lens, tiny_model)
        for b, (f, L) in enumerate(zip(feats, lens)):
            tr = forward_nar(f, L, tiny_model)
            np.testing.assert_allclose(bt.frame_logits.data[b, : len(f)], tr.frame_logits.data, atol=1e-10)
            np.testing.assert_allclose(bt.L_a.data[b, :L], tr.L_a.data, atol=1e-10)
            np.testing.assert_allclose(bt.L_f.data[b, :L], tr.L_f.data, atol=1e-10)


class TestInfer:
    def test_single_pass(self, tiny_model, rng):
        counter = PassCounter()
        trace, L_hat = infer(rng.normal(size=(10, 3)), tiny_model, counter)
        assert counter.count == 1
        assert trace.L == L_hat

    def test_matches_forward_at_predicted_length(self, tiny_vocab, rng):
        params = make_tiny_model(tiny_vocab, scale=3.0)
        x = rng.normal(size=(12, 3))
        trace, L_hat = infer(x, params)
        if L_hat == 0:
            pytest.skip("random model predicted no tokens")
        ref = forward_nar(x, L_hat, params)
        np.testing.assert_array_equal(trace.L_f.data, ref.L_f.data)

    def test_all_blank_gives_empty_trace(self, tiny_vocab, rng):
        params = make_tiny_model(tiny_vocab)
        params["ctc.w"].data[:] = 0
        params["ctc.b"].data[:] = 0
        params["ctc.b"].data[tiny_vocab.blank_id] = 5.0
        trace, L_hat = infer(rng.normal(size=(6, 3)), params)
        assert L_hat == 0
        assert trace.L_f.shape == (0, tiny_vocab.V)


def test_joint_loss_gradient_all_parameters(tiny_vocab, rng):
    params = make_tiny_model(tiny_vocab, d=8, d_in=3)
    x = rng.normal(size=(5, 3))
    target = [2, 4, 3]
    cfg = TrainConfig()

    def f():
        return joint_loss(forward_nar(x, 3, params), target, cfg)[0]

    assert grad_check(f, params.parameters(), max_coords=400, seed=1) < 1e-4


def test_parameters_are_float64(tiny_model):
    assert all(isinstance(t, Tensor) and t.data.dtype == np.float64 for t in tiny_model.parameters())
